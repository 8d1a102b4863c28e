fn main() {
    std::process::exit(datk::cli::cli_main(std::env::args_os()));
}
