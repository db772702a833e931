//! Brute-force reference implementations compared against the library.

mod common;

use pointcot::datagen::{generate_object, Family, LegPos};
use pointcot::geometry::Point3;
use pointcot::numerics::Rng;

#[test]
fn fps_matches_exhaustive_greedy_on_200_clouds() {
    assert_eq!(common::fps_oracle(200), Vec::<usize>::new());
}

#[test]
fn gcma_matches_triple_loop_on_100_seeds() {
    let worst = common::gcma_oracle(100);
    assert!(worst < 1e-10, "max deviation {worst:e}");
}

#[test]
fn ghr_matches_brute_force_checker_on_100_rationales() {
    let c = common::ghr_oracle(100);
    assert_eq!(c.reparse_failures, 0);
    assert_eq!(c.harness, c.oracle);
    assert_eq!(c.harness_rate, c.oracle.rate());
    assert!(c.oracle.verified_false > 0 && c.oracle.verified_true > 0 && c.oracle.unverifiable > 0);
}

/// Support test with an independent centroid and hull, for the one property
/// the facts checker takes from metadata.
#[test]
fn stability_agrees_with_brute_force_support_polygon() {
    let mut rng = Rng::new(4);
    for fam in [Family::Chair, Family::Table] {
        for i in 0..60 {
            let (_, meta) = generate_object(&format!("s{i}"), fam, 32, &mut rng).unwrap();
            let p = &meta.params;
            // Area-weighted centroid of the closed cuboids.
            let mut boxes: Vec<(Point3, Point3)> = Vec::new();
            let leg_top = p.height - p.slab;
            let mut feet = Vec::new();
            for pos in LegPos::ALL {
                if p.removed_leg == Some(pos) {
                    continue;
                }
                let (sx, sy) = pos.signs();
                let c = [sx * (p.depth / 2.0 - p.leg_inset), sy * (p.width / 2.0 - p.leg_inset), leg_top / 2.0];
                boxes.push((c, [p.leg_half, p.leg_half, leg_top / 2.0]));
                for (dx, dy) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                    feet.push([c[0] + dx * p.leg_half, c[1] + dy * p.leg_half]);
                }
            }
            boxes.push(([0.0, 0.0, p.height - p.slab / 2.0], [p.depth / 2.0, p.width / 2.0, p.slab / 2.0]));
            if fam == Family::Chair && p.backrest {
                boxes.push(([-p.depth / 2.0 - p.slab / 2.0, 0.0, p.height - p.slab + p.backrest_height / 2.0], [p.slab / 2.0, p.width / 2.0, p.backrest_height / 2.0]));
            }
            if fam == Family::Chair && p.armrests {
                for s in [1.0, -1.0] {
                    boxes.push(([0.0, s * (p.width / 2.0 - p.slab / 2.0), p.height + 0.22], [p.depth * 0.4, p.slab / 2.0, p.slab / 2.0]));
                }
            }
            let (mut cx, mut cy, mut total) = (0.0, 0.0, 0.0);
            for (c, h) in &boxes {
                let area = 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]);
                cx += area * c[0];
                cy += area * c[1];
                total += area;
            }
            let g = [cx / total, cy / total];
            // Inside iff strictly left of every hull edge; edges found by
            // checking all pairs.
            let mut inside = true;
            for a in &feet {
                for b in &feet {
                    let side = |q: &[f64; 2]| (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
                    if a != b && feet.iter().all(|q| side(q) >= -1e-12) && side(&g) <= 0.0 {
                        inside = false;
                    }
                }
            }
            assert_eq!(inside, meta.stable, "{fam} {i} margin {}", meta.support_margin);
        }
    }
}
