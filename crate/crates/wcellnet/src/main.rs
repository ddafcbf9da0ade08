fn main() {
    eprintln!("cli not wired up yet");
    std::process::exit(1);
}
