fn main() -> std::process::ExitCode {
    dmp_cli::main_with(std::env::args_os())
}
