//! The built-in body model: structure, posing and JSON export.
//!
//! `cargo run --example body_model -- --json` prints the model file instead.

use artisurf::default_body_model;

fn main() -> artisurf::Result<()> {
    let model = default_body_model();
    if std::env::args().any(|a| a == "--json") {
        println!("{}", model.to_json()?);
        return Ok(());
    }
    println!(
        "{} parts, {} joints, {} ellipsoids, {} DOF, hash {}",
        model.parts().len(),
        model.joints().len(),
        model.ellipsoid_count(),
        model.dof(),
        &model.hash()[..12],
    );
    for joint in model.joints() {
        let parent = &model.parts()[joint.parent].name;
        let child = &model.parts()[joint.child].name;
        println!(
            "  {:<15} {parent} -> {child}, limits {:?}",
            joint.name, joint.limits
        );
    }

    let mut pose = model.zero_pose();
    let knee = model
        .angle_index("left_knee", 0)
        .expect("default model has a left knee");
    pose.set(knee, -1.2);
    let rest = model.part_motions(&model.zero_pose())?;
    let bent = model.part_motions(&pose)?;
    for (p, part) in model.parts().iter().enumerate() {
        let moved = (bent[p].translation - rest[p].translation).norm();
        if moved > 0.0 {
            println!(
                "  bending the left knee moves {} by {:.3} m",
                part.name, moved
            );
        }
    }
    Ok(())
}
