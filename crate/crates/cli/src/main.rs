fn main() {
    std::process::exit(llpfc_cli::run(std::env::args_os()));
}
