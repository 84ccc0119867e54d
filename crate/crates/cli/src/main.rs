fn main() {
    println!("lprf: placeholder");
}
