fn main() -> std::process::ExitCode {
    cdmt::cli::run()
}
