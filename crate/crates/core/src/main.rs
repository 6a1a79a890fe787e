fn main() -> std::process::ExitCode {
    fedkappa::cli::main()
}
