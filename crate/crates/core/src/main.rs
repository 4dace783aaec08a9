fn main() -> std::process::ExitCode {
    chanest::cli::main_with_args(std::env::args_os())
}
