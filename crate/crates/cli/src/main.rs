fn main() {
    std::process::exit(ssdrec_cli::run(std::env::args_os()));
}
