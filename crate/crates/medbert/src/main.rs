fn main() {
    std::process::exit(medbert::cli::dispatch(std::env::args_os()));
}
