fn main() -> std::process::ExitCode {
    minimt::cli::main()
}
