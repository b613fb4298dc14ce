//! Depth binning against a linear scan over the edges, for both edge formulas.

mod common;

use auxdepth::lid::{Lid, LidConfig, LidFormula};
use auxdepth::tensor::Rng;
use common::scan_bin;

#[test]
fn lid_bins_match_linear_scan() {
    let mut rng = Rng::seed(14);
    for &(d_min, d_max, bins) in &[(1.0, 80.0, 64), (2.0, 46.8, 32), (0.5, 10.0, 3), (1.0, 60.0, 80)] {
        for formula in [LidFormula::Standard, LidFormula::Piecewise] {
            let mut cfg = LidConfig::new(d_min, d_max, bins).unwrap();
            cfg.formula = formula;
            let lid = Lid::new(cfg).unwrap();
            let edges = lid.edges().to_vec();
            assert_eq!(edges.len(), bins + 1);
            assert_eq!((edges[0], edges[bins]), (d_min, d_max));
            assert!(edges.windows(2).all(|w| w[1] > w[0]));
            if formula == LidFormula::Standard {
                let (n, span) = (bins as f64, d_max - d_min);
                for (i, e) in edges.iter().enumerate() {
                    let i = i as f64;
                    let widths: f64 = (1..=i as usize).map(|k| span * 2.0 * k as f64 / (n * (n + 1.0))).sum();
                    assert!((e - (d_min + widths)).abs() < 1e-9 * d_max);
                }
            }
            let mut depths: Vec<f64> = (0..2000).map(|_| rng.range(d_min - 1.0, d_max + 5.0)).collect();
            depths.extend(edges.iter().copied());
            depths.extend(edges.iter().map(|e| e - 1e-9));
            for d in depths {
                let want = if d < d_min { 0 } else { scan_bin(&edges, d) };
                assert_eq!(lid.depth_to_bin(d), want, "depth {d}");
            }
            for i in 0..bins {
                let c = lid.bin_center(i).unwrap();
                assert!(edges[i] < c && c < edges[i + 1]);
                assert_eq!(lid.depth_to_bin(c), i);
            }
        }
    }
}
