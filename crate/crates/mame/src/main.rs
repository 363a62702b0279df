fn main() {
    std::process::exit(mame::cli::dispatch(std::env::args_os()));
}
