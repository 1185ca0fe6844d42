//! Rollout files and stress-field rendering.
//!
//! A rollout file is a self-contained JSON document (topology, predicted and
//! ground-truth frames) so plotting needs no dataset access. Rendering emits
//! one standalone SVG per step with prediction and ground truth side by
//! side, colored by stress on a shared scale.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Frame {
    pub positions: Vec<[f64; 2]>,
    pub stress: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutFile {
    pub dt: f64,
    pub cells: Vec<[u32; 3]>,
    pub kinds: Vec<u8>,
    pub diverged: bool,
    pub predicted: Vec<Frame>,
    pub ground_truth: Vec<Frame>,
}

pub fn write_rollout_file(path: &Path, rollout: &RolloutFile) -> Result<()> {
    let text = serde_json::to_string(rollout)
        .map_err(|e| Error::Dataset(format!("rollout serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_rollout_file(path: &Path) -> Result<RolloutFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

// Inferno-like stops, dark to bright.
const STOPS: [[f64; 3]; 5] = [
    [0.0, 0.0, 4.0],
    [87.0, 16.0, 110.0],
    [188.0, 55.0, 84.0],
    [249.0, 142.0, 9.0],
    [252.0, 255.0, 164.0],
];

pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let k = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - k as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        rgb[c] = (STOPS[k][c] + f * (STOPS[k + 1][c] - STOPS[k][c])).round() as u8;
    }
    rgb
}

fn bounds(frames: &[&Frame]) -> ([f64; 2], [f64; 2]) {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for f in frames {
        for p in &f.positions {
            lo[0] = lo[0].min(p[0]);
            lo[1] = lo[1].min(p[1]);
            hi[0] = hi[0].max(p[0]);
            hi[1] = hi[1].max(p[1]);
        }
    }
    (lo, hi)
}

fn stress_range(frames: &[Frame]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for f in frames {
        for &s in &f.stress {
            lo = lo.min(s);
            hi = hi.max(s);
        }
    }
    if !(hi > lo) {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

fn render_panel(
    out: &mut String,
    cells: &[[u32; 3]],
    frame: &Frame,
    origin: (f64, f64),
    scale: f64,
    flip_y: f64,
    srange: (f64, f64),
) {
    for cell in cells {
        let pts: Vec<String> = cell
            .iter()
            .map(|&v| {
                let p = frame.positions[v as usize];
                format!("{:.2},{:.2}", origin.0 + p[0] * scale, origin.1 + (flip_y - p[1]) * scale)
            })
            .collect();
        let s = cell.iter().map(|&v| frame.stress[v as usize]).sum::<f64>() / 3.0;
        let t = (s - srange.0) / (srange.1 - srange.0).max(1e-12);
        let [r, g, b] = colormap(t);
        out.push_str(&format!(
            "<polygon points=\"{}\" fill=\"rgb({r},{g},{b})\" stroke=\"rgb(40,40,40)\" stroke-width=\"0.3\"/>\n",
            pts.join(" ")
        ));
    }
}

/// Renders every step of the rollout into `dir` as `step_###.svg`,
/// prediction on the left, ground truth on the right, with a shared stress
/// scale across all steps. Returns the number of images written.
pub fn render_rollout(rollout: &RolloutFile, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if rollout.predicted.len() != rollout.ground_truth.len() {
        return Err(Error::Shape("predicted/ground-truth frame counts differ".into()));
    }
    let all: Vec<&Frame> = rollout.predicted.iter().chain(&rollout.ground_truth).collect();
    let (lo, hi) = bounds(&all);
    let srange = stress_range(&rollout.ground_truth);
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = 420.0 / span;
    let panel_w = (hi[0] - lo[0]) * scale + 20.0;
    let panel_h = (hi[1] - lo[1]) * scale + 40.0;

    for (t, (pred, truth)) in
        rollout.predicted.iter().zip(&rollout.ground_truth).enumerate()
    {
        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" \
             viewBox=\"0 0 {:.0} {:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            2.0 * panel_w,
            panel_h,
            2.0 * panel_w,
            panel_h
        ));
        svg.push_str(&format!(
            "<text x=\"10\" y=\"16\" font-family=\"monospace\" font-size=\"13\">prediction (step {t})</text>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.0}\" y=\"16\" font-family=\"monospace\" font-size=\"13\">ground truth</text>\n",
            panel_w + 10.0
        ));
        render_panel(
            &mut svg,
            &rollout.cells,
            pred,
            (10.0 - lo[0] * scale, 30.0),
            scale,
            hi[1],
            srange,
        );
        render_panel(
            &mut svg,
            &rollout.cells,
            truth,
            (panel_w + 10.0 - lo[0] * scale, 30.0),
            scale,
            hi[1],
            srange,
        );
        svg.push_str("</svg>\n");
        let path = dir.join(format!("step_{t:03}.svg"));
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rollout.predicted.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 4]);
        assert_eq!(colormap(1.0), [252, 255, 164]);
    }

    #[test]
    fn rollout_file_roundtrip_and_render() {
        let dir = std::env::temp_dir().join("hcmt_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let frame = Frame {
            positions: vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]],
            stress: vec![0.0, 0.5, 1.0],
        };
        let rollout = RolloutFile {
            dt: 0.002,
            cells: vec![[0, 1, 2]],
            kinds: vec![0, 0, 2],
            diverged: false,
            predicted: vec![frame.clone(), frame.clone()],
            ground_truth: vec![frame.clone(), frame],
        };
        let path = dir.join("r.json");
        write_rollout_file(&path, &rollout).unwrap();
        let back = read_rollout_file(&path).unwrap();
        assert_eq!(back.cells, rollout.cells);

        let imgdir = dir.join("imgs");
        let n = render_rollout(&back, &imgdir).unwrap();
        assert_eq!(n, 2);
        let svg = std::fs::read_to_string(imgdir.join("step_000.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polygon"));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
