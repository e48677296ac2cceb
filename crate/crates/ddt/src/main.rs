fn main() {
    std::process::exit(ddt::cli::dispatch(std::env::args_os()));
}
