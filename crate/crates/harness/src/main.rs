fn main() {
    std::process::exit(dipp_harness::cli_main(std::env::args_os()));
}
