fn main() {
    std::process::exit(abp::cli::cli_main(std::env::args_os()));
}
