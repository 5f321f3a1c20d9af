//! Canny edges of a benchmark image, then rigid and non-rigid contour
//! augmentation. Writes PGM files to the directory given as the first
//! argument (default `contour-out`).

use std::path::PathBuf;

use higfa::contour::{augment_contour, canny, ContourParams, Rigidity};
use higfa::synthbench::{render, RenderParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "contour-out".into()));
    std::fs::create_dir_all(&out)?;
    let img = render(
        &RenderParams {
            class: 2,
            style: 1,
            dx: 0,
            dy: 0,
            fg_jitter: 0,
            bg_jitter: 0,
            mark: true,
        },
        60,
    );
    img.save_pgm(&out.join("source.pgm"))?;
    let params = ContourParams::default();
    let edges = canny(&img, params.canny_low, params.canny_high)?;
    edges.to_image().save_pgm(&out.join("edges.pgm"))?;
    println!("canny: {} edge pixels", edges.count());

    for (name, rigidity) in [("rigid", Rigidity::Rigid), ("nonrigid", Rigidity::NonRigid)] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let em = augment_contour(&img, rigidity, &params, &mut rng)?;
        em.save(&out, name)?;
        let p = &em.provenance;
        println!(
            "{name}: {} edge pixels, flipped {}, rotated {:.1} deg, {} TPS control points",
            em.count(),
            p.flipped(),
            p.rotation_deg(),
            p.tps().map_or(0, |(src, _)| src.len())
        );
    }
    println!("written to {}", out.display());
    Ok(())
}
