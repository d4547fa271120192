//! Every invariant as a property over random inputs. The per-module test
//! files run these one by one; the acceptance runner runs the whole table.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;

use avs_core::io::{parse_ply, parse_xyz};
use avs_core::segment::SegmentedMatrix;
use avs_core::vam::sigmoid;
use avs_core::voxel::occupied_voxel_count;
use avs_core::{
    build_hash_table, calibrate_layer, centroid_sample, farthest_point_sample, gather,
    generate_local_offsets, grid_from_batch, inter_aggregate, inter_voxel_query, intra_aggregate,
    intra_voxel_query, knn_search, run_cascade, scatter_reduce, validate_batch, vam_step,
    write_ply, write_xyz, Bounds, FeatureTransform, Identity, InitialFeatures, Linear, PointBatch,
    RawPoint, ReduceMode, Reduction, SampledLayer, SynthKind, SynthSpec, VamConfig, VamState,
    VoxelGridSpec,
};
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    chebyshev_pairs, full_sort_knn, grouping_mismatches, naive_fps, occupied_cells, random_batch,
    random_layer, random_points, rng,
};

pub const CASES: u32 = 128;

pub type Property = fn(&mut TestRunner) -> Result<(), String>;

pub fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

/// Runs one property, panicking with the shrunk counterexample.
pub fn check(property: Property) {
    if let Err(e) = property(&mut runner()) {
        panic!("{e}");
    }
}

fn run<S: Strategy>(
    runner: &mut TestRunner,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * (1.0 + a.abs().max(b.abs()))
}

pub const ALL: &[(&str, Property)] = &[
    ("validate_batch is idempotent", validation_is_idempotent),
    (
        "dense remap preserves frame classes",
        remap_preserves_frame_classes,
    ),
    (
        "grid bounds enclose every point",
        grid_bounds_enclose_points,
    ),
    (
        "axis counts are ceil(extent / size)",
        axis_counts_follow_extent,
    ),
    ("voxel keys round trip", flatten_round_trips),
    (
        "scatter_reduce matches per-segment scan",
        segments_match_scan,
    ),
    (
        "scatter_reduce is permutation equivariant",
        segment_permutation_equivariance,
    ),
    ("segment sum is linear", segment_sum_is_linear),
    (
        "gather of mean is a projection",
        mean_projection_is_idempotent,
    ),
    (
        "gather of mean is exact on integer groups",
        mean_projection_is_exact_on_integer_groups,
    ),
    (
        "reductions are bit-identical on 1, 2 and 8 threads",
        parallel_reduction_is_bit_identical,
    ),
    (
        "grouping equals pairwise oracle",
        grouping_matches_pairwise_oracle,
    ),
    (
        "group ids are dense, keyed and monotone",
        assignment_invariants,
    ),
    (
        "hash lookup returns the group id",
        hash_lookup_returns_group_id,
    ),
    (
        "neighbors equal the Chebyshev oracle",
        neighbors_match_chebyshev_oracle,
    ),
    (
        "neighbor table shape and self pairs",
        neighbor_table_invariants,
    ),
    (
        "interior neighbors are symmetric",
        interior_neighbors_are_symmetric,
    ),
    (
        "whole-voxel translation keeps groups",
        translation_by_whole_voxels_keeps_groups,
    ),
    (
        "centroids lie in their voxels",
        centroids_lie_in_their_voxels,
    ),
    (
        "centroids equal group averages",
        centroids_match_group_averages,
    ),
    (
        "one point per voxel passes features through",
        one_point_per_voxel_passes_features_through,
    ),
    (
        "unit neighborhood is the self pair",
        unit_neighborhood_is_self_only,
    ),
    (
        "shuffling points keeps voxel outputs",
        shuffling_points_keeps_voxel_outputs,
    ),
    (
        "nested cascade counts do not grow",
        nested_cascade_counts_do_not_grow,
    ),
    (
        "nested sizes never add voxels",
        nested_sizes_never_add_voxels,
    ),
    (
        "occupied count equals oracle",
        occupied_count_matches_oracle,
    ),
    (
        "vam step is bounded and state consistent",
        vam_step_is_bounded,
    ),
    (
        "scale falls while ratio stays high",
        scale_falls_while_ratio_stays_high,
    ),
    ("calibration is reproducible", calibration_is_reproducible),
    ("fps equals the re-scan oracle", fps_matches_rescan),
    (
        "fps distances shrink and cover",
        fps_distances_shrink_and_cover,
    ),
    ("knn equals the full-sort oracle", knn_matches_full_sort),
    (
        "knn self query is sorted from zero",
        knn_self_query_is_sorted,
    ),
    (
        "xyz round trip is exact at nine digits",
        xyz_round_trip_is_exact,
    ),
    ("ply round trip is exact", ply_round_trip_is_exact),
    ("generators are pure", generators_are_pure),
];

// types

fn raw_points() -> impl Strategy<Value = Vec<RawPoint<f64>>> {
    prop::collection::vec((-5i64..5, prop::array::uniform3(-10.0f64..10.0)), 1..120).prop_map(|v| {
        v.into_iter()
            .map(|(f, c)| RawPoint::new(f * 1000 + 7, c))
            .collect()
    })
}

pub fn validation_is_idempotent(r: &mut TestRunner) -> Result<(), String> {
    run(r, raw_points(), |raw| {
        let once = validate_batch(raw).unwrap();
        let twice = validate_batch(once.to_raw()).unwrap();
        prop_assert_eq!(once, twice);
        Ok(())
    })
}

pub fn remap_preserves_frame_classes(r: &mut TestRunner) -> Result<(), String> {
    run(r, raw_points(), |raw| {
        let batch = validate_batch(raw.clone()).unwrap();
        let ids = batch.batch_ids();
        for i in 0..raw.len() {
            for j in 0..raw.len() {
                prop_assert_eq!(raw[i].frame == raw[j].frame, ids[i] == ids[j]);
            }
        }
        // Dense and in first-occurrence order.
        let mut next = 0;
        for &b in ids {
            prop_assert!(b <= next);
            if b == next {
                next += 1;
            }
        }
        prop_assert_eq!(next as usize, batch.batch_count());
        Ok(())
    })
}

pub fn grid_bounds_enclose_points(r: &mut TestRunner) -> Result<(), String> {
    run(
        r,
        (raw_points(), 0.01f64..4.0, 0.0f64..1.0),
        |(raw, size, pad)| {
            let batch = validate_batch(raw).unwrap();
            let grid = grid_from_batch(&batch, size, pad).unwrap();
            let (min, max) = (grid.min_r(), grid.max_r());
            for p in batch.coords() {
                for a in 0..3 {
                    prop_assert!(min[a] <= p[a] && p[a] <= max[a]);
                }
            }
            Ok(())
        },
    )
}

pub fn axis_counts_follow_extent(r: &mut TestRunner) -> Result<(), String> {
    let s = (
        prop::array::uniform3(-50.0f64..50.0),
        prop::array::uniform3(0.001f64..20.0),
        0.01f64..5.0,
    );
    run(r, s, |(min, ext, size)| {
        let max = [0, 1, 2].map(|a| min[a] + ext[a]);
        let grid = VoxelGridSpec::new(size, Bounds { min, max }, 3).unwrap();
        for a in 0..3 {
            let expected = ((max[a] - min[a]) / size).ceil().max(1.0) as u64;
            prop_assert_eq!(grid.axis_counts()[a], expected);
        }
        Ok(())
    })
}

pub fn flatten_round_trips(r: &mut TestRunner) -> Result<(), String> {
    let s = (
        prop::array::uniform3(1u64..40),
        1usize..6,
        prop::collection::vec(any::<u64>(), 1..50),
    );
    run(r, s, |(counts, batches, picks)| {
        let max = counts.map(|c| c as f64);
        let grid = VoxelGridSpec::new(1.0, Bounds { min: [0.0; 3], max }, batches).unwrap();
        for k in picks {
            let key = k % (batches as u64 * counts.iter().product::<u64>());
            prop_assert_eq!(grid.flatten(&grid.unflatten(key)), key);
        }
        Ok(())
    })
}

// segment reduce

/// Values, segment ids covering `0..m`, and `m`.
fn segments() -> impl Strategy<Value = (Array2<f64>, Vec<usize>, usize)> {
    (1usize..40, 1usize..5).prop_flat_map(|(m, c)| {
        (m..m + 200).prop_flat_map(move |rows| {
            (
                prop::collection::vec(-1e3f64..1e3, rows * c),
                prop::collection::vec(0..m, rows),
            )
                .prop_map(move |(vals, mut ids)| {
                    // Every segment gets at least one row.
                    ids[..m].iter_mut().enumerate().for_each(|(g, id)| *id = g);
                    (Array2::from_shape_vec((rows, c), vals).unwrap(), ids, m)
                })
        })
    })
}

fn reduce(values: &Array2<f64>, ids: &[usize], m: usize, mode: ReduceMode) -> Reduction<f64> {
    scatter_reduce(
        &SegmentedMatrix::new(values.clone(), ids.to_vec(), m).unwrap(),
        mode,
    )
}

fn reduced(values: &Array2<f64>, ids: &[usize], m: usize, mode: ReduceMode) -> Array2<f64> {
    reduce(values, ids, m, mode).into_values().unwrap()
}

pub fn segments_match_scan(r: &mut TestRunner) -> Result<(), String> {
    run(r, segments(), |(values, ids, m)| {
        let sum = reduced(&values, &ids, m, ReduceMode::Sum);
        let mean = reduced(&values, &ids, m, ReduceMode::Mean);
        let Reduction::Max {
            values: max,
            argmax,
        } = reduce(&values, &ids, m, ReduceMode::Max)
        else {
            unreachable!()
        };
        let Reduction::Count(counts) = reduce(&values, &ids, m, ReduceMode::Count) else {
            unreachable!()
        };
        for g in 0..m {
            let rows: Vec<usize> = (0..ids.len()).filter(|&r| ids[r] == g).collect();
            prop_assert_eq!(counts[[g, 0]], rows.len());
            for j in 0..values.ncols() {
                let s: f64 = rows.iter().map(|&r| values[[r, j]]).sum();
                prop_assert!(close(sum[[g, j]], s, 1e-12));
                prop_assert_eq!(mean[[g, j]], sum[[g, j]] / rows.len() as f64);
                let best = rows.iter().copied().fold(rows[0], |b, r| {
                    if values[[r, j]] > values[[b, j]] {
                        r
                    } else {
                        b
                    }
                });
                prop_assert_eq!(argmax[[g, j]], best);
                prop_assert_eq!(max[[g, j]], values[[best, j]]);
            }
        }
        Ok(())
    })
}

pub fn segment_permutation_equivariance(r: &mut TestRunner) -> Result<(), String> {
    run(r, (segments(), any::<u64>()), |((values, ids, m), seed)| {
        let mut perm: Vec<usize> = (0..ids.len()).collect();
        perm.shuffle(&mut rng(seed));
        let pv = values.select(Axis(0), &perm);
        let pids: Vec<usize> = perm.iter().map(|&r| ids[r]).collect();
        // Max and count are exact under any order; sums only up to rounding.
        prop_assert_eq!(
            reduced(&values, &ids, m, ReduceMode::Max),
            reduced(&pv, &pids, m, ReduceMode::Max)
        );
        prop_assert_eq!(
            reduce(&values, &ids, m, ReduceMode::Count),
            reduce(&pv, &pids, m, ReduceMode::Count)
        );
        for mode in [ReduceMode::Sum, ReduceMode::Mean] {
            let a = reduced(&values, &ids, m, mode);
            let b = reduced(&pv, &pids, m, mode);
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!(close(*x, *y, 1e-12));
            }
        }
        Ok(())
    })
}

pub fn segment_sum_is_linear(r: &mut TestRunner) -> Result<(), String> {
    run(
        r,
        (segments(), -10.0f64..10.0, -10.0f64..10.0, any::<u64>()),
        |((x, ids, m), a, b, seed)| {
            let mut g = rng(seed);
            let y = x.mapv(|_| g.gen_range(-1e3..1e3));
            let lhs = reduced(&(&x * a + &y * b), &ids, m, ReduceMode::Sum);
            let rhs = reduced(&x, &ids, m, ReduceMode::Sum) * a
                + reduced(&y, &ids, m, ReduceMode::Sum) * b;
            // Relative to the summed magnitudes, which bound the rounding.
            let scale = reduced(
                &(x.mapv(f64::abs) * a.abs() + y.mapv(f64::abs) * b.abs()),
                &ids,
                m,
                ReduceMode::Sum,
            );
            for ((l, r), s) in lhs.iter().zip(rhs.iter()).zip(scale.iter()) {
                prop_assert!((l - r).abs() <= 1e-12 * s.max(f64::MIN_POSITIVE));
            }
            Ok(())
        },
    )
}

pub fn mean_projection_is_idempotent(r: &mut TestRunner) -> Result<(), String> {
    run(r, segments(), |(values, ids, m)| {
        let once = gather(&reduced(&values, &ids, m, ReduceMode::Mean), &ids).unwrap();
        let twice = gather(&reduced(&once, &ids, m, ReduceMode::Mean), &ids).unwrap();
        // Summing k copies of a mean and dividing by k can be off by a few ulps.
        let k = ids.len() as f64;
        for (a, b) in once.iter().zip(twice.iter()) {
            prop_assert!((a - b).abs() <= 4.0 * k * f64::EPSILON * a.abs());
        }
        Ok(())
    })
}

pub fn mean_projection_is_exact_on_integer_groups(r: &mut TestRunner) -> Result<(), String> {
    run(r, segments(), |(values, ids, m)| {
        let per_group: Vec<f64> = (0..m).map(|g| (g as f64 * 37.0) % 101.0 - 50.0).collect();
        let constant =
            Array2::from_shape_fn(values.dim(), |(r, j)| per_group[ids[r]] * (j as f64 + 1.0));
        let once = gather(&reduced(&constant, &ids, m, ReduceMode::Mean), &ids).unwrap();
        prop_assert_eq!(&once, &constant);
        let twice = gather(&reduced(&once, &ids, m, ReduceMode::Mean), &ids).unwrap();
        prop_assert_eq!(once, twice);
        Ok(())
    })
}

const MODES: [ReduceMode; 4] = [
    ReduceMode::Sum,
    ReduceMode::Max,
    ReduceMode::Mean,
    ReduceMode::Count,
];

pub fn parallel_reduction_is_bit_identical(r: &mut TestRunner) -> Result<(), String> {
    let pools: Vec<rayon::ThreadPool> = [1, 2, 8]
        .iter()
        .map(|&t| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
        })
        .collect();
    run(r, segments(), |(values, ids, m)| {
        let outputs: Vec<[Reduction<f64>; 4]> = pools
            .iter()
            .map(|p| p.install(|| MODES.map(|mode| reduce(&values, &ids, m, mode))))
            .collect();
        let bits = |r: &Reduction<f64>| {
            r.values()
                .map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        };
        for other in &outputs[1..] {
            for (a, b) in outputs[0].iter().zip(other.iter()) {
                prop_assert_eq!(bits(a), bits(b));
                prop_assert_eq!(a, b);
            }
        }
        Ok(())
    })
}

// voxel queries

fn batches() -> impl Strategy<Value = (u64, usize, u32, f64)> {
    (any::<u64>(), 1usize..400, 1u32..4, 0.05f64..3.0)
}

pub fn grouping_matches_pairwise_oracle(r: &mut TestRunner) -> Result<(), String> {
    run(r, batches(), |(seed, n, frames, size)| {
        let batch = random_batch(&mut rng(seed), n, frames);
        let grid = grid_from_batch(&batch, size, 0.0).unwrap();
        let a = intra_voxel_query(&batch, &grid).unwrap();
        prop_assert_eq!(grouping_mismatches(&batch, &grid, a.group_ids()), 0);
        Ok(())
    })
}

pub fn assignment_invariants(r: &mut TestRunner) -> Result<(), String> {
    run(r, batches(), |(seed, n, frames, size)| {
        let batch = random_batch(&mut rng(seed), n, frames);
        let grid = grid_from_batch(&batch, size, 0.0).unwrap();
        let a = intra_voxel_query(&batch, &grid).unwrap();
        let m = a.group_count();
        let mut seen = vec![false; m];
        for &g in a.group_ids() {
            prop_assert!(g < m);
            seen[g] = true;
        }
        prop_assert!(seen.iter().all(|s| *s));
        let (keys, ids) = (a.keys(), a.group_ids());
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(keys[i] == keys[j], ids[i] == ids[j]);
                if keys[i] < keys[j] {
                    prop_assert!(ids[i] <= ids[j]);
                }
            }
        }
        Ok(())
    })
}

pub fn hash_lookup_returns_group_id(r: &mut TestRunner) -> Result<(), String> {
    run(r, batches(), |(seed, n, frames, size)| {
        let batch = random_batch(&mut rng(seed), n, frames);
        let grid = grid_from_batch(&batch, size, 0.0).unwrap();
        let a = intra_voxel_query(&batch, &grid).unwrap();
        let table = build_hash_table(&a);
        prop_assert_eq!(table.len(), a.group_count());
        for (k, g) in a.keys().iter().zip(a.group_ids()) {
            prop_assert_eq!(table.get(*k), Some(*g));
        }
        Ok(())
    })
}

fn layers() -> impl Strategy<Value = (u64, usize, u32, u64, usize)> {
    (any::<u64>(), 1usize..300, 1u32..3, 2u64..9, 0usize..3)
}

fn sorted_pairs(pairs: impl Iterator<Item = (usize, usize)>) -> Vec<(usize, usize)> {
    let mut v: Vec<_> = pairs.collect();
    v.sort_unstable();
    v
}

pub fn neighbors_match_chebyshev_oracle(r: &mut TestRunner) -> Result<(), String> {
    run(r, layers(), |(seed, m, frames, extent, half)| {
        let nbr = 2 * half + 1;
        let (layer, grid, cells) = random_layer(&mut rng(seed), m, frames, extent);
        let table = inter_voxel_query(&layer, &grid, nbr).unwrap();
        prop_assert_eq!(
            sorted_pairs(table.pairs()),
            chebyshev_pairs(layer.batch_ids(), &cells, nbr)
        );
        Ok(())
    })
}

pub fn neighbor_table_invariants(r: &mut TestRunner) -> Result<(), String> {
    run(r, layers(), |(seed, m, frames, extent, half)| {
        let nbr = 2 * half + 1;
        let (layer, grid, cells) = random_layer(&mut rng(seed), m, frames, extent);
        let m = layer.count();
        let table = inter_voxel_query(&layer, &grid, nbr).unwrap();
        prop_assert_eq!(table.nbr_indices().len(), table.entry_count());
        prop_assert_eq!(table.inter_gid().len(), table.entry_count());
        prop_assert!(table.entry_count() <= m * nbr.pow(3));
        let mut self_pairs = vec![0; m];
        for (c, n) in table.pairs() {
            if c == n {
                self_pairs[c] += 1;
            }
        }
        prop_assert!(self_pairs.iter().all(|&k| k == 1));
        // Full tables only when every candidate voxel exists.
        let occupied: BTreeSet<(u32, [i64; 3])> = layer
            .batch_ids()
            .iter()
            .copied()
            .zip(cells.iter().copied())
            .collect();
        let offsets = generate_local_offsets(nbr).unwrap();
        let all_present = layer.batch_ids().iter().zip(&cells).all(|(&b, c)| {
            offsets.iter().all(|o| {
                let n = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
                n.iter().all(|&v| v >= 0 && v < extent as i64) && occupied.contains(&(b, n))
            })
        });
        prop_assert_eq!(table.entry_count() == m * nbr.pow(3), all_present);
        Ok(())
    })
}

pub fn interior_neighbors_are_symmetric(r: &mut TestRunner) -> Result<(), String> {
    run(
        r,
        (any::<u64>(), 1usize..300, 3u64..9),
        |(seed, m, extent)| {
            let (layer, grid, cells) = random_layer(&mut rng(seed), m, 2, extent);
            let table = inter_voxel_query(&layer, &grid, 3).unwrap();
            let pairs: BTreeSet<_> = table.pairs().collect();
            let interior = |c: &[i64; 3]| c.iter().all(|&v| v >= 1 && v < extent as i64 - 1);
            for &(a, b) in &pairs {
                if interior(&cells[a]) && interior(&cells[b]) {
                    prop_assert!(pairs.contains(&(b, a)));
                }
            }
            Ok(())
        },
    )
}

pub fn translation_by_whole_voxels_keeps_groups(r: &mut TestRunner) -> Result<(), String> {
    let s = (any::<u64>(), 1usize..300, prop::array::uniform3(-20i32..20));
    run(r, s, |(seed, n, shift)| {
        // Dyadic size and coordinates keep the shifted arithmetic exact.
        let size = 0.25;
        let pts: Vec<[f64; 3]> = random_points(&mut rng(seed), n, 0.0, 4.0)
            .into_iter()
            .map(|p| p.map(|v| (v * 1024.0).floor() / 1024.0))
            .collect();
        let off = shift.map(|s| s as f64 * size);
        let moved: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| [p[0] + off[0], p[1] + off[1], p[2] + off[2]])
            .collect();
        let grid = VoxelGridSpec::new(
            size,
            Bounds {
                min: [0.0; 3],
                max: [4.0; 3],
            },
            1,
        )
        .unwrap();
        let moved_grid = VoxelGridSpec::new(
            size,
            Bounds {
                min: off,
                max: off.map(|o| o + 4.0),
            },
            1,
        )
        .unwrap();
        let a = intra_voxel_query(&PointBatch::single_frame(pts).unwrap(), &grid).unwrap();
        let b = intra_voxel_query(&PointBatch::single_frame(moved).unwrap(), &moved_grid).unwrap();
        prop_assert_eq!(a.group_ids(), b.group_ids());
        Ok(())
    })
}

// sampling

fn random_linear(r: &mut impl Rng, d_in: usize, d_out: usize) -> Linear<f64> {
    let w = Array2::from_shape_fn((d_in, d_out), |_| r.gen_range(-2.0..2.0));
    let b = Array1::from_shape_fn(d_out, |_| r.gen_range(-1.0..1.0));
    Linear::new(w, Some(b)).unwrap()
}

pub fn centroids_lie_in_their_voxels(r: &mut TestRunner) -> Result<(), String> {
    run(r, batches(), |(seed, n, frames, size)| {
        let batch = random_batch(&mut rng(seed), n, frames);
        let grid = grid_from_batch(&batch, size, 0.0).unwrap();
        let a = intra_voxel_query(&batch, &grid).unwrap();
        let c = centroid_sample(&batch, &a).unwrap();
        prop_assert!(c.count() <= batch.count());
        prop_assert_eq!(c.count(), a.group_count());
        for ((p, &b), key) in c.coords().iter().zip(c.batch_ids()).zip(a.group_keys()) {
            // Against the group key's voxel; re-flooring a centroid on a face is flaky.
            let v = grid.unflatten(key);
            prop_assert_eq!(v.batch, b as u64);
            let lo = grid.voxel_origin(&v);
            for ax in 0..3 {
                let slack = 1e-12 * (1.0 + lo[ax].abs());
                prop_assert!(p[ax] >= lo[ax] - slack && p[ax] <= lo[ax] + size + slack);
            }
        }
        Ok(())
    })
}

pub fn centroids_match_group_averages(r: &mut TestRunner) -> Result<(), String> {
    run(r, batches(), |(seed, n, frames, size)| {
        let batch = random_batch(&mut rng(seed), n, frames);
        let grid = grid_from_batch(&batch, size, 0.0).unwrap();
        let c = centroid_sample(&batch, &intra_voxel_query(&batch, &grid).unwrap()).unwrap();
        let oracle = super::group_means(&batch, &grid);
        prop_assert_eq!(oracle.len(), c.count());
        // Both sides come out in (frame, cell) order.
        for ((_, want), got) in oracle.iter().zip(c.coords()) {
            for ax in 0..3 {
                prop_assert!(close(want[ax], got[ax], 1e-12));
            }
        }
        Ok(())
    })
}

pub fn one_point_per_voxel_passes_features_through(r: &mut TestRunner) -> Result<(), String> {
    run(
        r,
        (any::<u64>(), 1usize..200, 1usize..4),
        |(seed, m, width)| {
            let mut g = rng(seed);
            let (layer, grid, _) = random_layer(&mut g, m, 2, 6);
            let feats = Array2::from_shape_fn((layer.count(), width), |_| g.gen_range(-3.0..3.0));
            let batch = layer.with_features(Some(feats.clone())).unwrap();
            let a = intra_voxel_query(&batch, &grid).unwrap();
            let c = centroid_sample(&batch, &a).unwrap();
            let out =
                intra_aggregate(&batch, &a, &c, &Identity, InitialFeatures::Coordinates).unwrap();
            prop_assert_eq!(out.dim(), (batch.count(), width + 3));
            for (row, &gid) in a.group_ids().iter().enumerate() {
                for j in 0..width {
                    prop_assert_eq!(out[[gid, j]], feats[[row, j]]);
                }
                for j in width..width + 3 {
                    prop_assert_eq!(out[[gid, j]], 0.0);
                }
            }
            Ok(())
        },
    )
}

pub fn unit_neighborhood_is_self_only(r: &mut TestRunner) -> Result<(), String> {
    run(r, (any::<u64>(), 1usize..200), |(seed, m)| {
        let mut g = rng(seed);
        let (layer, grid, _) = random_layer(&mut g, m, 2, 6);
        let t = inter_voxel_query(&layer, &grid, 1).unwrap();
        let feats = Array2::from_shape_fn((layer.count(), 2), |_| g.gen_range(-3.0..3.0));
        let lin = random_linear(&mut g, 5, 3);
        let out = inter_aggregate(&layer, feats.view(), &t, &lin).unwrap();
        let own = ndarray::concatenate![Axis(1), feats, Array2::zeros((layer.count(), 3))];
        prop_assert_eq!(out, lin.apply(own.view()).unwrap());
        Ok(())
    })
}

pub fn shuffling_points_keeps_voxel_outputs(r: &mut TestRunner) -> Result<(), String> {
    run(
        r,
        (any::<u64>(), 1usize..400, 0.1f64..2.0),
        |(seed, n, size)| {
            let mut g = rng(seed);
            let batch = random_batch(&mut g, n, 2);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut g);
            let shuffled = PointBatch::from_parts(
                perm.iter().map(|&i| batch.batch_ids()[i]).collect(),
                perm.iter().map(|&i| batch.coords()[i]).collect(),
                None,
            )
            .unwrap();
            let grid = grid_from_batch(&batch, size, 0.0).unwrap();
            let by_key = |b: &PointBatch<f64>| {
                let layer =
                    SampledLayer::build(b, grid, 3, &Identity, InitialFeatures::Coordinates)
                        .unwrap();
                let rows = layer.features.rows().into_iter().map(|f| f.to_vec());
                layer
                    .assignment
                    .group_keys()
                    .into_iter()
                    .zip(layer.points.coords().iter().copied().zip(rows))
                    .collect::<BTreeMap<_, _>>()
            };
            let (a, b) = (by_key(&batch), by_key(&shuffled));
            prop_assert_eq!(a.len(), b.len());
            for ((ka, (pa, fa)), (kb, (pb, fb))) in a.iter().zip(b.iter()) {
                prop_assert_eq!(ka, kb);
                for ax in 0..3 {
                    prop_assert!(close(pa[ax], pb[ax], 1e-12));
                }
                for (x, y) in fa.iter().zip(fb) {
                    prop_assert!(close(*x, *y, 1e-9));
                }
            }
            Ok(())
        },
    )
}

pub fn nested_cascade_counts_do_not_grow(r: &mut TestRunner) -> Result<(), String> {
    run(
        r,
        (any::<u64>(), 1usize..400, 0.05f64..1.0),
        |(seed, n, size)| {
            let batch = random_batch(&mut rng(seed), n, 2);
            let sizes = [size, 2.0 * size, 4.0 * size];
            let layers =
                run_cascade(&batch, &sizes, 3, &Identity, InitialFeatures::Coordinates).unwrap();
            prop_assert!(layers[0].points.count() <= n);
            for w in layers.windows(2) {
                prop_assert!(w[1].points.count() <= w[0].points.count());
            }
            Ok(())
        },
    )
}

// voxel adaptation

pub fn nested_sizes_never_add_voxels(r: &mut TestRunner) -> Result<(), String> {
    run(
        r,
        (any::<u64>(), 1usize..600, 0.01f64..1.0),
        |(seed, n, size)| {
            let batch =
                PointBatch::single_frame(random_points(&mut rng(seed), n, 0.0, 1.0)).unwrap();
            let bounds = Bounds {
                min: [0.0; 3],
                max: [1.0; 3],
            };
            let counts: Vec<usize> = [1.0, 2.0, 4.0]
                .iter()
                .map(|k| {
                    occupied_voxel_count(&batch, &VoxelGridSpec::new(size * k, bounds, 1).unwrap())
                        .unwrap()
                })
                .collect();
            prop_assert!(
                counts[0] >= counts[1] && counts[1] >= counts[2],
                "{:?}",
                counts
            );
            Ok(())
        },
    )
}

pub fn occupied_count_matches_oracle(r: &mut TestRunner) -> Result<(), String> {
    run(r, batches(), |(seed, n, frames, size)| {
        let batch = random_batch(&mut rng(seed), n, frames);
        let grid = grid_from_batch(&batch, size, 0.0).unwrap();
        prop_assert_eq!(
            occupied_voxel_count(&batch, &grid).unwrap(),
            occupied_cells(&batch, &grid)
        );
        Ok(())
    })
}

pub fn vam_step_is_bounded(r: &mut TestRunner) -> Result<(), String> {
    let s = (
        prop::collection::vec(1.0f64..50.0, 1..40),
        1.01f64..10.0,
        0.01f64..3.0,
        0.01f64..5.0,
        0.0f64..1.0,
    );
    run(r, s, |(ratios, reference, i_r, k_p, k_i)| {
        let c = VamConfig {
            i_r,
            k_p,
            k_i,
            ..VamConfig::new(reference, 0.1)
        };
        let mut s: VamState<f64> = VamState::new();
        for (i, ratio) in ratios.iter().enumerate() {
            let before = s.scale;
            let err = reference - ratio;
            let diff = k_p * err + k_i * (s.err_integral + err).clamp(-100.0, 100.0);
            s = vam_step(s, &c, *ratio);
            let expected = i_r * (sigmoid(diff) - 0.5);
            // Measured as a difference of scales, so allow rounding of the sum.
            let step =
                (s.scale - before).abs() - 4.0 * f64::EPSILON * s.scale.abs().max(before.abs());
            prop_assert!(close(s.scale - before, expected, 1e-9));
            // The sigmoid rounds to exactly 0 or 1 once |diff| passes ~37.
            if diff.abs() < 30.0 {
                prop_assert!(step < i_r / 2.0);
            } else {
                prop_assert!(step <= i_r / 2.0);
            }
            prop_assert!(c.voxel_size(s.scale) > 0.0);
            prop_assert_eq!(s.history.len(), i + 1);
            prop_assert_eq!(s.iteration, i + 1);
            prop_assert!(s.err_integral.abs() <= 100.0);
        }
        Ok(())
    })
}

pub fn scale_falls_while_ratio_stays_high(r: &mut TestRunner) -> Result<(), String> {
    run(
        r,
        (prop::collection::vec(0.001f64..20.0, 1..40), 1.01f64..8.0),
        |(excess, reference)| {
            let c = VamConfig::new(reference, 0.1);
            let mut s = VamState::new();
            for e in excess {
                let before = s.scale;
                s = vam_step(s, &c, reference + e);
                prop_assert!(s.scale < before);
            }
            Ok(())
        },
    )
}

pub fn calibration_is_reproducible(r: &mut TestRunner) -> Result<(), String> {
    run(
        r,
        (any::<u64>(), 50usize..500, 1.2f64..4.0),
        |(seed, n, reference)| {
            let data: Vec<PointBatch<f64>> = SynthSpec::new(SynthKind::UniformCube, 2, n, seed)
                .unwrap()
                .frames();
            let c = VamConfig {
                max_iterations: 40,
                ..VamConfig::new(reference, 0.1)
            };
            let a = calibrate_layer(&data, &c).unwrap();
            let b = calibrate_layer(&data, &c).unwrap();
            prop_assert_eq!(a.state.history.len(), a.state.iteration);
            prop_assert_eq!(a, b);
            Ok(())
        },
    )
}

// baselines

fn cloud(seed: u64, n: usize, dupes: bool) -> Vec<[f64; 3]> {
    let mut g = rng(seed);
    let mut pts = random_points(&mut g, n, -1.0, 1.0);
    if dupes && n > 2 {
        for _ in 0..n / 4 {
            let (a, b) = (g.gen_range(0..n), g.gen_range(0..n));
            pts[a] = pts[b];
        }
    }
    pts
}

pub fn fps_matches_rescan(r: &mut TestRunner) -> Result<(), String> {
    let s = (
        any::<u64>(),
        1usize..150,
        0.0f64..1.0,
        any::<prop::sample::Index>(),
        any::<bool>(),
    );
    run(r, s, |(seed, n, frac, start, dupes)| {
        let pts = cloud(seed, n, dupes);
        let m = 1 + ((n - 1) as f64 * frac) as usize;
        let s = start.index(n);
        let got =
            farthest_point_sample(&PointBatch::single_frame(pts.clone()).unwrap(), m, s).unwrap();
        prop_assert_eq!(got.selected_indices, naive_fps(&pts, m, s));
        Ok(())
    })
}

pub fn fps_distances_shrink_and_cover(r: &mut TestRunner) -> Result<(), String> {
    run(
        r,
        (any::<u64>(), 2usize..300, 0.0f64..1.0),
        |(seed, n, frac)| {
            let m = 1 + ((n - 1) as f64 * frac) as usize;
            let res = farthest_point_sample(
                &PointBatch::single_frame(cloud(seed, n, false)).unwrap(),
                m,
                0,
            )
            .unwrap();
            prop_assert!(res.selection_dists[0].is_infinite());
            prop_assert!(res.selection_dists.windows(2).all(|w| w[1] <= w[0]));
            if m > 1 {
                let last = res.selection_dists[m - 1];
                prop_assert!(res.min_dists.iter().all(|d| *d <= last));
            }
            for &i in &res.selected_indices {
                prop_assert_eq!(res.min_dists[i], 0.0);
            }
            Ok(())
        },
    )
}

pub fn knn_matches_full_sort(r: &mut TestRunner) -> Result<(), String> {
    let s = (
        any::<u64>(),
        1usize..60,
        1usize..200,
        0.0f64..1.0,
        any::<bool>(),
    );
    run(r, s, |(seed, q, n, kfrac, dupes)| {
        let refs = cloud(seed, n, dupes);
        let queries = cloud(seed ^ 0x9e37, q, false);
        let k = 1 + ((n - 1) as f64 * kfrac) as usize;
        let got = knn_search(
            &PointBatch::single_frame(queries.clone()).unwrap(),
            &PointBatch::single_frame(refs.clone()).unwrap(),
            k,
        )
        .unwrap();
        for (i, w) in full_sort_knn(&queries, &refs, k).iter().enumerate() {
            prop_assert_eq!(got.neighbors(i), &w[..]);
        }
        Ok(())
    })
}

pub fn knn_self_query_is_sorted(r: &mut TestRunner) -> Result<(), String> {
    run(
        r,
        (any::<u64>(), 1usize..200, 0.0f64..1.0),
        |(seed, n, kfrac)| {
            let pts = PointBatch::single_frame(cloud(seed, n, false)).unwrap();
            let k = 1 + ((n - 1) as f64 * kfrac) as usize;
            let res = knn_search(&pts, &pts, k).unwrap();
            prop_assert_eq!(res.query_count(), n);
            for i in 0..n {
                let d = res.distances_of(i);
                prop_assert_eq!(d[0], 0.0);
                prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
            }
            Ok(())
        },
    )
}

// io and datasets

fn nine_digits(v: f64) -> f64 {
    format!("{v:.8e}").parse().unwrap()
}

pub fn xyz_bytes(batch: &PointBatch<f64>) -> Vec<u8> {
    let mut out = Vec::new();
    write_xyz(batch, &mut out).unwrap();
    out
}

pub fn xyz_round_trip_is_exact(r: &mut TestRunner) -> Result<(), String> {
    let s = (
        prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 5), 1..60),
        0usize..3,
    );
    run(r, s, |(rows, width)| {
        let coords: Vec<[f64; 3]> = rows
            .iter()
            .map(|r| [r[0], r[1], r[2]].map(nine_digits))
            .collect();
        let feats = (width > 0).then(|| {
            Array2::from_shape_fn((rows.len(), width), |(i, j)| nine_digits(rows[i][3 + j]))
        });
        let batch = PointBatch::single_frame(coords)
            .unwrap()
            .with_features(feats)
            .unwrap();
        let parsed: PointBatch<f64> = parse_xyz(Cursor::new(xyz_bytes(&batch))).unwrap();
        prop_assert_eq!(&parsed, &batch);
        prop_assert_eq!(xyz_bytes(&parsed), xyz_bytes(&batch));
        Ok(())
    })
}

pub fn ply_round_trip_is_exact(r: &mut TestRunner) -> Result<(), String> {
    run(
        r,
        prop::collection::vec(prop::array::uniform4(-1e3f64..1e3), 1..60),
        |rows| {
            let coords: Vec<[f64; 3]> = rows.iter().map(|r| [r[0], r[1], r[2]]).collect();
            let feats = Array2::from_shape_fn((rows.len(), 1), |(i, _)| rows[i][3]);
            let batch = PointBatch::single_frame(coords)
                .unwrap()
                .with_features(Some(feats))
                .unwrap();
            let mut out = Vec::new();
            write_ply(&batch, Some(&["intensity".to_string()]), &mut out).unwrap();
            let back: PointBatch<f64> = parse_ply(Cursor::new(out)).unwrap();
            prop_assert_eq!(back, batch);
            Ok(())
        },
    )
}

pub fn generators_are_pure(r: &mut TestRunner) -> Result<(), String> {
    run(
        r,
        (any::<u64>(), 0usize..3, 0usize..4),
        |(seed, kind, frame)| {
            let kind = [
                SynthKind::UniformCube,
                SynthKind::GaussianClusters {
                    clusters: 3,
                    sigma: 0.1,
                },
                SynthKind::RadialLidar {
                    r_min: 0.1,
                    r_max: 2.0,
                },
            ][kind];
            let a = xyz_bytes(
                &SynthSpec::new(kind, 4, 64, seed)
                    .unwrap()
                    .frame::<f64>(frame),
            );
            let b = xyz_bytes(
                &SynthSpec::new(kind, 4, 64, seed)
                    .unwrap()
                    .frame::<f64>(frame),
            );
            prop_assert_eq!(a, b);
            Ok(())
        },
    )
}
