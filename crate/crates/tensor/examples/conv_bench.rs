use std::time::Instant;
use hetfuse_tensor::{conv_backward, conv_forward, ConvGeometry, Tensor};

fn main() {
    for (cin, cout, dims, kd) in [(4usize, 4usize, [32usize, 128, 32], 3usize), (8, 8, [16, 64, 16], 3), (8, 8, [32, 128, 1], 1), (16, 16, [8, 32, 8], 3)] {
        let x = Tensor::<f32>::from_fn([1, cin, dims[0], dims[1], dims[2]], |[_, c, h, w, d]| ((c + h * 3 + w * 7 + d) % 11) as f32 * 0.1);
        let w = Tensor::<f32>::from_fn([cout, cin, 3, 3, kd], |[a, b, c, d, e]| ((a + b + c + d + e) % 5) as f32 * 0.01);
        let geo = ConvGeometry::same([3, 3, kd]);
        let t = Instant::now();
        let y = conv_forward(&x, &w, None, geo);
        let tf = t.elapsed();
        let t = Instant::now();
        let _ = conv_backward(&x, &w, geo, &y, true);
        let tb = t.elapsed();
        let flops = 2.0 * (cin * cout * 9 * kd) as f64 * (dims.iter().product::<usize>()) as f64;
        println!("{cin}->{cout} {dims:?}: fwd {tf:?} ({:.1} GF/s) bwd {tb:?}", flops / tf.as_secs_f64() / 1e9);
    }
}
