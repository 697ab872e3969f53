fn main() -> std::process::ExitCode {
    kdq7::cli::main()
}
