//! Renders dot annotations into a density map, writes it in the on-disk
//! format, and reads it back.

use repcount::density::{count, header_path, read_density, render_density, write_density, Dot};

fn main() -> repcount::Result<()> {
    let dots = vec![Dot { x: 10.5, y: 12.0 }, Dot { x: 0.0, y: 0.0 }, Dot { x: 47.9, y: 31.2 }, Dot { x: 30.0, y: 16.0 }];
    for sigma in [1.0, 2.0, 6.0] {
        let z = render_density(&dots, 32, 48, sigma)?;
        let peak = z.values.iter().copied().fold(0.0, f64::max);
        println!("sigma {sigma}: count {:.6}, peak {peak:.4}", count(&z));
    }

    let z = render_density(&dots, 32, 48, 2.0)?;
    let dir = std::env::temp_dir().join("repcount-density-example");
    std::fs::create_dir_all(&dir).map_err(|e| repcount::Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join("map.bin");
    write_density(&z, &path)?;
    let back = read_density(&path)?;
    println!("wrote {} and {}", path.display(), header_path(&path).display());
    println!("round trip: count {:.6}, max abs error {:.2e}", count(&back), (&back.values - &z.values).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
    Ok(())
}
