//! Correspondence points on a single ellipsoid and the datum distance.

use nalgebra::{Matrix3, Rotation3, Vector3};

use artisurf::{Datum, Ellipsoid};

fn main() -> artisurf::Result<()> {
    let rotation = Rotation3::from_euler_angles(0.3, -0.2, 0.8).into_inner();
    let e = Ellipsoid::new(
        Vector3::new(0.3, 0.1, 0.1),
        rotation,
        Vector3::new(0.0, 0.0, 1.0),
    )?;

    for n in [Vector3::x(), Vector3::y(), Vector3::new(1.0, 1.0, 1.0)] {
        let c = e.correspond(&n)?;
        println!(
            "normal {:?} -> point {:.4?} (q = {:+.1e}, scale {:.4})",
            n.normalize().as_slice(),
            c.surface_point.as_slice(),
            e.algebraic_distance(&c.surface_point),
            c.scale,
        );
    }

    // A datum 1 cm off the surface along its own normal.
    let n = Vector3::new(0.0, 0.6, 0.8);
    let x = e.correspond(&n)?.surface_point;
    let datum = Datum::new(x + n * 0.01, n)?;
    let sigma = Matrix3::identity() * 0.01f64.powi(2);
    println!(
        "datum distance with sigma = 1 cm: {:.4}",
        e.datum_distance(&datum, &sigma)?
    );
    println!(
        "algebraic distance of the datum point: {:.4}",
        e.algebraic_distance(&datum.point)
    );
    Ok(())
}
