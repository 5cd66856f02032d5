fn main() {
    std::process::exit(osnet::cli::dispatch(std::env::args_os()));
}
