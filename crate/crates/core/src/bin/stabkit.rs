fn main() -> std::process::ExitCode {
    stabkit::cli::main_with_args(std::env::args_os())
}
