fn main() {
    std::process::exit(m3po::cli::run(std::env::args_os()));
}
