fn main() {
    std::process::exit(clkm::harness::cli(std::env::args_os()));
}
