fn main() {
    std::process::exit(exact_alloc::cli::dispatch(std::env::args_os()));
}
