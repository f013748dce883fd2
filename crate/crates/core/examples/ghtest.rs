fn main() {
    for n in [20usize, 200] {
        let (x, w) = nvitext::quadrature::gauss_hermite(n);
        let s: f64 = w.iter().sum();
        println!("n={} sum_w={:.6e} sqrt_pi={:.6e}", n, s, std::f64::consts::PI.sqrt());
        let mid = n / 2;
        for i in (mid.saturating_sub(2))..(mid + 2).min(n) {
            println!("  i={} x={:.6} w={:.6e}", i, x[i], w[i]);
        }
        println!("  i=0 x={:.6} w={:.6e}", x[0], w[0]);
    }
}
