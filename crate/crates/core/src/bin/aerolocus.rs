fn main() {
    std::process::exit(aerolocus::cli::dispatch(std::env::args_os()));
}
