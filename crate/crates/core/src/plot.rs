//! Static SVG rendering of sampler trajectories.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sampling::Trajectory;

const SIZE: f64 = 600.0;
const MARGIN: f64 = 40.0;

/// Renders the first two coordinates of every path: one polyline per
/// sample, its start as a source point and its end as a target point.
pub fn trajectory_svg(traj: &Trajectory) -> Result<String> {
    if traj.batch() == 0 || traj.states.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    if traj.dim() < 2 {
        return Err(Error::invalid("plotting needs at least two coordinates"));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for s in &traj.states {
        for row in s.iter_rows() {
            for j in 0..2 {
                lo[j] = lo[j].min(row[j] as f64);
                hi[j] = hi[j].max(row[j] as f64);
            }
        }
    }
    let span = (0..2).map(|j| hi[j] - lo[j]).fold(0.0f64, f64::max).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let px = |x: f32| MARGIN + (x as f64 - lo[0]) * scale;
    let py = |y: f32| SIZE - MARGIN - (y as f64 - lo[1]) * scale;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8" standalone="no"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<title>Sampler trajectories, N = {}</title>"#, traj.steps());
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">N = {}</text>"#,
        SIZE / 2.0,
        traj.steps()
    );
    let _ = writeln!(s, r##"<g fill="none" stroke="#4a6fa5" stroke-width="0.8" stroke-opacity="0.6">"##);
    for i in 0..traj.batch() {
        s.push_str("<polyline points=\"");
        for (k, st) in traj.states.iter().enumerate() {
            let r = st.row(i);
            if k > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{:.2},{:.2}", px(r[0]), py(r[1]));
        }
        s.push_str("\"/>\n");
    }
    s.push_str("</g>\n");
    for (color, label, states) in [("#2b8a3e", "source", traj.start()), ("#c92a2a", "target", traj.endpoint())] {
        let _ = writeln!(s, r#"<g fill="{color}" class="{label}">"#);
        for r in states.iter_rows() {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2"/>"#, px(r[0]), py(r[1]));
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::nets::VelocityModel;
    use crate::rng::RngStream;
    use crate::sampling::euler_sample;

    struct Swirl;

    impl VelocityModel for Swirl {
        fn data_dim(&self) -> usize {
            2
        }
        fn velocity(&self, x: &Tensor, _t: &[f32], _h: &Tensor) -> crate::Result<Tensor> {
            let d = x.iter_rows().flat_map(|r| [5.0 - r[1], 5.0 + r[0]]).collect();
            Tensor::new(x.shape().to_vec(), d)
        }
    }

    #[test]
    fn structure_matches_paths() {
        let x0 = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let svg = trajectory_svg(&euler_sample(&Swirl, &x0, 1).unwrap()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        for line in svg.lines().filter(|l| l.starts_with("<polyline")) {
            let pts = line.split('"').nth(1).unwrap();
            assert_eq!(pts.split(' ').count(), 2);
        }
        assert!(svg.contains("N = 1"));
        assert!(svg.contains(r#"version="1.1""#));
        assert_eq!(svg.matches("<circle").count(), 4);
    }

    #[test]
    fn hundred_paths_stay_small() {
        let x0 = RngStream::new(0).normal_tensor(100, 2);
        let svg = trajectory_svg(&euler_sample(&Swirl, &x0, 100).unwrap()).unwrap();
        assert!(svg.len() < 2 * 1024 * 1024, "{}", svg.len());
        assert_eq!(svg.matches("<polyline").count(), 100);
    }
}
