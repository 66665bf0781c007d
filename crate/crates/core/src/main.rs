fn main() {
    std::process::exit(icfd::cli::cli_main(std::env::args_os()));
}
