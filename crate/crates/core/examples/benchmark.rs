//! The synthetic fine-grained benchmark: classes share a coarse shape and
//! differ only in a small mark the edge detector never sees.

use higfa::contour::canny;
use higfa::synthbench::{coarse_of, generate_benchmark, render, BenchmarkSpec, RenderParams, SHAPES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = BenchmarkSpec::default();
    let d = generate_benchmark(&spec)?;
    println!(
        "{} classes x {} images: {} train, {} val, {} test",
        spec.classes,
        spec.per_class,
        d.splits.train.len(),
        d.splits.val.len(),
        d.splits.test.len()
    );
    for class in 0..d.classes() {
        println!("class {class}: coarse shape {}", SHAPES[coarse_of(class)]);
    }
    // the two classes of one shape: same edges, different pixels
    let clean = |class| {
        render(
            &RenderParams {
                class,
                style: 0,
                dx: 0,
                dy: 0,
                fg_jitter: 0,
                bg_jitter: 0,
                mark: true,
            },
            spec.mark_depth,
        )
    };
    let (a, b) = (clean(0), clean(1));
    let differing = a.pixels().iter().zip(b.pixels()).filter(|(p, q)| p != q).count();
    let same_edges = canny(&a, 120, 200)? == canny(&b, 120, 200)?;
    println!("classes 0 and 1: {differing} pixels differ, identical edges: {same_edges}");
    if let Some(dir) = std::env::args().nth(1) {
        d.save(std::path::Path::new(&dir))?;
        println!("saved to {dir}");
    }
    Ok(())
}
