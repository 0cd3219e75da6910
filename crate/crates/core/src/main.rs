fn main() -> std::process::ExitCode {
    tracerseg::cli::main()
}
