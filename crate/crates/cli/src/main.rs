fn main() -> std::process::ExitCode {
    xfr_cli::main_entry()
}
