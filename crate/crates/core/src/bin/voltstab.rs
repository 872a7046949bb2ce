fn main() {
    std::process::exit(voltstab::bench::cli::cli_main(std::env::args_os()));
}
