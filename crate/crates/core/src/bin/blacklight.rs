fn main() -> std::process::ExitCode {
    blacklight::cli::main()
}
