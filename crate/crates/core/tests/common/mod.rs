//! Brute-force reference implementations used by the integration and
//! acceptance tests. They favour obviousness over speed.
#![allow(dead_code)]

/// Synchronous GrowCut by direct simulation: every pass collects all
/// attacks on every cell, sorts them and applies the strongest.
pub fn growcut_oracle(intensity: &[f64], dims: [usize; 3], seeds: &[u8], max_passes: usize) -> Vec<u8> {
    let lo = intensity.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = intensity.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let g = |a: f64, b: f64| if range > 0.0 { 1.0 - (a - b).abs() / range } else { 1.0 };
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);

    let mut label = seeds.to_vec();
    let mut strength: Vec<f64> = seeds.iter().map(|&s| if s > 0 { 1.0 } else { 0.0 }).collect();
    for _ in 0..max_passes {
        let mut next_label = label.clone();
        let mut next_strength = strength.clone();
        let mut changed = false;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = idx(x, y, z);
                    let mut attacks: Vec<(f64, u8)> = Vec::new();
                    for nz in z.saturating_sub(1)..=(z + 1).min(dims[2] - 1) {
                        for ny in y.saturating_sub(1)..=(y + 1).min(dims[1] - 1) {
                            for nx in x.saturating_sub(1)..=(x + 1).min(dims[0] - 1) {
                                let q = idx(nx, ny, nz);
                                if q == p {
                                    continue;
                                }
                                let a = g(intensity[p], intensity[q]) * strength[q];
                                if a > strength[p] {
                                    attacks.push((a, label[q]));
                                }
                            }
                        }
                    }
                    attacks.sort_by(|u, v| v.0.total_cmp(&u.0).then(u.1.cmp(&v.1)));
                    if let Some(&(a, l)) = attacks.first() {
                        next_label[p] = l;
                        next_strength[p] = a;
                        changed = true;
                    }
                }
            }
        }
        label = next_label;
        strength = next_strength;
        if !changed {
            break;
        }
    }
    label
}

/// Margin expansion by comparing every voxel against every source voxel.
pub fn margin_oracle(
    labels: &[u8],
    dims: [usize; 3],
    spacing: [f64; 3],
    source: u8,
    target: u8,
    margin: f64,
) -> Vec<u8> {
    let coords = |v: usize| {
        let x = v % dims[0];
        let y = (v / dims[0]) % dims[1];
        let z = v / (dims[0] * dims[1]);
        [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]]
    };
    let sources: Vec<[f64; 3]> = (0..labels.len()).filter(|&v| labels[v] == source).map(coords).collect();
    (0..labels.len())
        .map(|v| {
            let p = coords(v);
            let within = sources.iter().any(|s| {
                let d = ((p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2) + (p[2] - s[2]).powi(2)).sqrt();
                d <= margin + 1e-9
            });
            match labels[v] {
                l if l == target => {
                    if within {
                        target
                    } else {
                        0
                    }
                }
                0 if within => target,
                l => l,
            }
        })
        .collect()
}

/// Sort-and-scan Dxcc: hottest voxels first, stop once the accumulated
/// voxel count covers `x_cc` (with the library's 1e-9 relative slack).
pub fn dx_oracle(doses: &[f64], voxel_cc: f64, x_cc: f64) -> (f64, bool) {
    let mut sorted = doses.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for (k, d) in sorted.iter().enumerate() {
        if (k + 1) as f64 * voxel_cc >= x_cc * (1.0 - 1e-9) {
            return (*d, false);
        }
    }
    (*sorted.last().unwrap(), true)
}
