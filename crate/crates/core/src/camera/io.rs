use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{Intrinsics, Pose, Trajectory};
use crate::error::{Error, Result};

const TRAJ_HEADER: &str = "frame,r11,r12,r13,r21,r22,r23,r31,r32,r33,tx,ty,tz";

pub fn write_trajectory_csv(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    write_poses_csv(path, traj.poses())
}

/// Any pose list in the trajectory CSV layout.
pub fn write_poses_csv(path: impl AsRef<Path>, poses: &[Pose]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from(TRAJ_HEADER);
    s.push('\n');
    for (i, p) in poses.iter().enumerate() {
        write!(s, "{i}").unwrap();
        for r in 0..3 {
            for c in 0..3 {
                write!(s, ",{}", p.r[(r, c)]).unwrap();
            }
        }
        writeln!(s, ",{},{},{}", p.t.x, p.t.y, p.t.z).unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn parse_row(path: &Path, line: &str, n: usize) -> Result<Vec<f64>> {
    let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
    let vals = vals.map_err(|e| Error::data(path, format!("bad number in {line:?}: {e}")))?;
    if vals.len() != n {
        return Err(Error::data(path, format!("expected {n} columns, got {}", vals.len())));
    }
    Ok(vals)
}

pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    Trajectory::new(read_poses_csv(path)?).map_err(|e| Error::data(path, e.to_string()))
}

pub fn read_poses_csv(path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == TRAJ_HEADER => {}
        other => return Err(Error::data(path, format!("bad header {other:?}"))),
    }
    let mut poses = Vec::new();
    for (i, line) in lines.enumerate() {
        let v = parse_row(path, line, 13)?;
        if v[0] as usize != i {
            return Err(Error::data(path, format!("frame {} out of order", v[0])));
        }
        let r = Matrix3::new(v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9]);
        poses.push(Pose::new(r, Vector3::new(v[10], v[11], v[12])).map_err(|e| Error::data(path, e.to_string()))?);
    }
    Ok(poses)
}

pub fn write_intrinsics_csv(path: impl AsRef<Path>, k: &Intrinsics) -> Result<()> {
    let path = path.as_ref();
    let s = format!("fx,fy,cx,cy\n{},{},{},{}\n", k.fx, k.fy, k.cx, k.cy);
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_intrinsics_csv(path: impl AsRef<Path>) -> Result<Intrinsics> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("fx,fy,cx,cy") {
        return Err(Error::data(path, "bad intrinsics header"));
    }
    let row = lines.next().ok_or_else(|| Error::data(path, "missing intrinsics row"))?;
    let v = parse_row(path, row, 4)?;
    Intrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::data(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajectory.csv");
        let traj = Trajectory::new(vec![
            Pose::identity(),
            Pose::from_axis_angle(Vector3::new(0.1, 0.9, 0.2), 0.123456789, Vector3::new(0.01, -0.02, 1.0 / 3.0)),
        ])
        .unwrap();
        write_trajectory_csv(&path, &traj).unwrap();
        assert_eq!(read_trajectory_csv(&path).unwrap(), traj);
        let kpath = dir.path().join("intrinsics.csv");
        let k = Intrinsics::from_fov(32, 60.0);
        write_intrinsics_csv(&kpath, &k).unwrap();
        assert_eq!(read_intrinsics_csv(&kpath).unwrap(), k);
    }
}
