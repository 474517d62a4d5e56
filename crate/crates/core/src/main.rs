fn main() {
    std::process::exit(block_admm::cli::run(std::env::args_os()));
}
