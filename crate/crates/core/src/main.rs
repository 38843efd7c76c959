fn main() -> std::process::ExitCode {
    eaanet::cli::run(std::env::args_os())
}
