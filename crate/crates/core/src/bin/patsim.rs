fn main() {
    std::process::exit(patsim::cli::run(std::env::args_os()));
}
