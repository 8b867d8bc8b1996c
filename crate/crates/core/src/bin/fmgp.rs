fn main() {
    std::process::exit(fmgp::cli::run(std::env::args_os()));
}
