mod feed;

fn main() {
    let quotes = [101_250u64, 101_300, 101_180];
    println!("median {}", feed::median(&quotes));
}
