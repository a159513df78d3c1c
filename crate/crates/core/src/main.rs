fn main() -> std::process::ExitCode {
    r2d2_core::cli::run()
}
