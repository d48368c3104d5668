//! The blended implicit surface of two touching ellipsoids, probed along
//! vertical lines through one ellipsoid's top and through the seam.

use nalgebra::{Matrix3, Vector3};

use artisurf::surface::BlendedSurface;
use artisurf::{BlendParams, Ellipsoid};

fn main() -> artisurf::Result<()> {
    let parts = [
        Ellipsoid::aligned(0.2, 0.06, 0.06, Vector3::new(-0.18, 0.0, 0.0))?,
        Ellipsoid::aligned(0.2, 0.06, 0.06, Vector3::new(0.18, 0.0, 0.0))?,
    ];
    let n = Vector3::z();
    for nu in [0.02, 0.1] {
        let surface =
            BlendedSurface::new(&parts, &Matrix3::identity(), BlendParams::new(nu, 1.0)?)?;
        println!("nu = {nu}");
        for x in [-0.18, 0.0] {
            for i in 0..=4 {
                let y = Vector3::new(x, 0.0, 0.04 + 0.01 * i as f64);
                println!(
                    "  x = {x:+.2} z = {:.2}  f = {:.4}  df/dz = {:+.3}",
                    y.z,
                    surface.value(&y, &n),
                    surface.gradient(&y, &n).z
                );
            }
        }
    }
    Ok(())
}
