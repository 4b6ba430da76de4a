fn main() -> std::process::ExitCode {
    pbsnet_cli::main_with_args(std::env::args_os())
}
