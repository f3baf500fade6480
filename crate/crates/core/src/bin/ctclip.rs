fn main() {
    std::process::exit(ctclip::cli::dispatch(std::env::args_os()));
}
