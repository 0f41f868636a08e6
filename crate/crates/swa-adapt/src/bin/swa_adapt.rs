fn main() {
    // CLI wiring lands with the harness module.
    eprintln!("swa-adapt: not yet wired");
    std::process::exit(2);
}
