//! Point-normal cloud files and JSON helpers.
//!
//! A cloud file holds one datum per line, `x y z nx ny nz`, optionally
//! followed by an inlier label `0|1`. Blank lines and text after `#` are
//! ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::ellipsoid::Datum;
use crate::em::FrameResult;
use crate::error::{Error, Result};
use crate::synth::MotionScript;

#[derive(Debug, Clone, PartialEq)]
pub struct Cloud {
    pub data: Vec<Datum>,
    /// Present when every line carries a label.
    pub inlier: Option<Vec<bool>>,
}

/// Formats a cloud; floats use the shortest representation that round-trips.
pub fn format_cloud(data: &[Datum], inlier: Option<&[bool]>) -> String {
    let mut out = String::with_capacity(data.len() * 96);
    out.push_str(if inlier.is_some() {
        "# x y z nx ny nz inlier\n"
    } else {
        "# x y z nx ny nz\n"
    });
    for (i, d) in data.iter().enumerate() {
        let (p, n) = (&d.point, &d.normal);
        let _ = write!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z);
        if let Some(labels) = inlier {
            out.push_str(if labels[i] { " 1" } else { " 0" });
        }
        out.push('\n');
    }
    out
}

pub fn parse_cloud(text: &str, origin: &str) -> Result<Cloud> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut labelled: Option<bool> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 6 && fields.len() != 7 {
            return Err(err(
                line_no,
                format!("expected 6 or 7 columns, found {}", fields.len()),
            ));
        }
        let has_label = fields.len() == 7;
        if *labelled.get_or_insert(has_label) != has_label {
            return Err(err(line_no, "inconsistent label column".into()));
        }
        let mut v = [0.0; 6];
        for (slot, f) in v.iter_mut().zip(&fields[..6]) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(line_no, format!("bad number '{f}'")))?;
        }
        let datum = Datum::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        )
        .map_err(|e| err(line_no, e.to_string()))?;
        data.push(datum);
        if has_label {
            labels.push(match fields[6] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(err(
                        line_no,
                        format!("label must be 0 or 1, found '{other}'"),
                    ))
                }
            });
        }
    }
    Ok(Cloud {
        data,
        inlier: labelled.unwrap_or(false).then_some(labels),
    })
}

pub fn write_cloud(path: &Path, data: &[Datum], inlier: Option<&[bool]>) -> Result<()> {
    fs::write(path, format_cloud(data, inlier))?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<Cloud> {
    let text = fs::read_to_string(path)?;
    parse_cloud(&text, &path.display().to_string())
}

/// File name of frame `k` inside a cloud directory.
pub fn cloud_file_name(k: usize) -> String {
    format!("frame_{k:04}.xyzn")
}

/// File name of frame `k`'s tracking result.
pub fn result_file_name(k: usize) -> String {
    format!("result_{k:04}.json")
}

pub const SCRIPT_FILE: &str = "script.json";
pub const TRAJECTORY_FILE: &str = "trajectory.json";

/// Cloud files of a directory in frame order.
pub fn list_clouds(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xyzn"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyInput("cloud directory has no .xyzn files"));
    }
    Ok(files)
}

pub fn write_script(path: &Path, script: &MotionScript) -> Result<()> {
    fs::write(path, script.to_json()? + "\n")?;
    Ok(())
}

pub fn read_script(path: &Path) -> Result<MotionScript> {
    MotionScript::from_json_str(&fs::read_to_string(path)?)
}

pub fn write_frame_result(path: &Path, result: &FrameResult) -> Result<()> {
    fs::write(path, result.to_json()? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Datum> {
        vec![
            Datum::new(Vector3::new(0.1, -2.5e-3, 1.0 / 3.0), Vector3::z()).unwrap(),
            Datum::new(Vector3::new(1e300, 0.0, -0.0), Vector3::new(0.6, 0.8, 0.0)).unwrap(),
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let data = sample();
        let text = format_cloud(&data, None);
        let back = parse_cloud(&text, "mem").unwrap();
        assert_eq!(back.data, data);
        assert_eq!(back.inlier, None);

        let labels = [true, false];
        let back = parse_cloud(&format_cloud(&data, Some(&labels)), "mem").unwrap();
        assert_eq!(back.inlier.as_deref(), Some(&labels[..]));
    }

    #[test]
    fn comments_and_blank_lines() {
        let text = "# header\n\n0 0 1 0 0 1 # trailing\n  \n1 2 3 1 0 0\n";
        assert_eq!(parse_cloud(text, "mem").unwrap().data.len(), 2);
    }

    #[test]
    fn malformed_lines_report_their_position() {
        for (text, line) in [
            ("0 0 1 0 0 1\n0 0 1 0 0\n", 2),
            ("0 0 x 0 0 1\n", 1),
            ("0 0 1 0 0 2\n", 1),
            ("0 0 1 0 0 1 1\n0 0 1 0 0 1\n", 2),
            ("0 0 1 0 0 1 2\n", 1),
            ("0 0 nan 0 0 1\n", 1),
        ] {
            match parse_cloud(text, "f") {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }
}
