use std::collections::{HashMap, HashSet};

use augnet::evalkit::{
    hungarian_accuracy, kmeans, knn, knn_by_id, mean_average_precision, pair_retrieval_eval,
    pair_retrieval_from_embeddings, pca_project, train_probe, PixelEmbedder, ProbeKind, ProbeSpec, RandomEmbedder,
    RetrievalIndex, PROBE_HIDDEN,
};
use augnet::imaging::{AugmentConfig, EnabledOps};
use augnet::synth::{gaussian_blobs, textured_sources};
use augnet::{Matrix, RngStream};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    RngStream::new(seed, 77).rng()
}

/// Small integer coordinates make exact distance ties common.
fn random_matrix(r: &mut ChaCha8Rng, n: usize, d: usize, integer: bool) -> Matrix {
    let data = (0..n * d)
        .map(|_| {
            if integer {
                r.random_range(0..3) as f64
            } else {
                r.random_range(-1.0..1.0)
            }
        })
        .collect();
    Matrix::new(n, d, data).unwrap()
}

fn shuffled_ids(r: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut ids: Vec<String> = (0..n).map(|i| format!("item{i:04}")).collect();
    ids.shuffle(r);
    ids
}

fn full_sort_oracle(ids: &[String], x: &Matrix, q: &[f64], skip: Option<usize>) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = (0..x.rows())
        .filter(|&p| Some(p) != skip)
        .map(|p| {
            let mut s = 0.0;
            for (a, b) in x.row(p).iter().zip(q) {
                s += (a - b) * (a - b);
            }
            (ids[p].clone(), s.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    all
}

#[test]
fn knn_matches_full_sort_on_random_instances() {
    let mut r = rng(1);
    for case in 0..100 {
        let (n, d) = (r.random_range(2..60), r.random_range(1..6));
        let x = random_matrix(&mut r, n, d, case % 2 == 0);
        let ids = shuffled_ids(&mut r, n);
        let index = RetrievalIndex::new(ids.clone(), x.clone()).unwrap();
        let q: Vec<f64> = (0..d).map(|_| r.random_range(0..3) as f64).collect();
        let k = r.random_range(1..=n);
        let got = knn(&index, &q, k).unwrap();
        let want = full_sort_oracle(&ids, &x, &q, None);
        let want_ids: Vec<String> = want.iter().take(k).map(|w| w.0.clone()).collect();
        let want_d: Vec<f64> = want.iter().take(k).map(|w| w.1).collect();
        assert_eq!(got.neighbors, want_ids, "case {case}");
        assert_eq!(got.distances, want_d, "case {case}");
    }
}

#[test]
fn knn_200_by_16_matches_oracle() {
    let mut r = rng(2);
    let x = random_matrix(&mut r, 200, 16, false);
    let ids = shuffled_ids(&mut r, 200);
    let index = RetrievalIndex::new(ids.clone(), x.clone()).unwrap();
    for p in 0..20 {
        let got = knn_by_id(&index, &ids[p], 199).unwrap();
        let want = full_sort_oracle(&ids, &x, x.row(p), Some(p));
        assert_eq!(got.neighbors, want.iter().map(|w| w.0.clone()).collect::<Vec<_>>());
        assert!(!got.neighbors.contains(&ids[p]));
        assert!(got.distances.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn knn_trivial_cases_and_errors() {
    let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![1.0, 0.0]]).unwrap();
    let index = RetrievalIndex::with_row_ids(x);
    let hit = knn(&index, &[3.0, 4.0], 1).unwrap();
    assert_eq!((hit.neighbors[0].as_str(), hit.distances[0]), ("1", 0.0));
    let all = knn(&index, &[0.0, 0.0], 3).unwrap();
    assert_eq!(all.neighbors, ["0", "2", "1"]);
    assert_eq!(all.distances, [0.0, 1.0, 5.0]);
    assert!(knn(&index, &[0.0, 0.0], 4).is_err());
    assert!(knn(&index, &[0.0], 1).is_err());
    assert!(knn_by_id(&index, "0", 3).is_err());
    assert!(knn_by_id(&index, "missing", 1).is_err());
    let dup = RetrievalIndex::new(vec!["a".into(), "a".into()], Matrix::zeros(2, 1));
    assert!(matches!(dup, Err(augnet::Error::DuplicateId(_))));
}

#[test]
fn knn_is_stable_under_row_permutation() {
    let mut r = rng(3);
    for _ in 0..30 {
        let n = r.random_range(3..40);
        let x = random_matrix(&mut r, n, 3, true);
        let ids = shuffled_ids(&mut r, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let a = RetrievalIndex::new(ids.clone(), x.clone()).unwrap();
        let b = RetrievalIndex::new(perm.iter().map(|&p| ids[p].clone()).collect(), x.select_rows(&perm)).unwrap();
        let q = [1.0, 0.0, 2.0];
        assert_eq!(knn(&a, &q, n).unwrap(), knn(&b, &q, n).unwrap());
    }
}

fn direct_ap(ranking: &[String], relevant: &HashSet<String>) -> f64 {
    // Precision at the position of each relevant item, averaged.
    let positions: Vec<usize> = ranking
        .iter()
        .enumerate()
        .filter(|(_, id)| relevant.contains(*id))
        .map(|(p, _)| p + 1)
        .collect();
    let mut sum = 0.0;
    for (i, &pos) in positions.iter().enumerate() {
        sum += (i + 1) as f64 / pos as f64;
    }
    sum / relevant.len() as f64
}

#[test]
fn map_matches_direct_definition() {
    let mut r = rng(4);
    for case in 0..100 {
        let n = if case == 0 { 50 } else { r.random_range(3..50) };
        let x = random_matrix(&mut r, n, 4, case % 3 == 0);
        let ids = shuffled_ids(&mut r, n);
        let index = RetrievalIndex::new(ids.clone(), x.clone()).unwrap();
        let mut relevance = HashMap::new();
        let queries: Vec<String> = ids.iter().take(5.min(n)).cloned().collect();
        let mut expected = 0.0;
        for (qi, q) in queries.iter().enumerate() {
            let mut rel: HashSet<String> = ids
                .iter()
                .filter(|id| *id != q && r.random_bool(0.3))
                .cloned()
                .collect();
            if rel.is_empty() {
                rel.insert(ids[(qi + 1) % n].clone());
            }
            let ranking: Vec<String> = full_sort_oracle(&ids, &x, x.row(qi), Some(qi))
                .into_iter()
                .map(|w| w.0)
                .collect();
            expected += direct_ap(&ranking, &rel);
            relevance.insert(q.clone(), rel);
        }
        expected /= queries.len() as f64;
        let got = mean_average_precision(&index, &queries, &relevance).unwrap();
        assert!((got - expected).abs() < 1e-12, "case {case}: {got} vs {expected}");
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn map_trivial_cases() {
    let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![10.0]]).unwrap();
    let index = RetrievalIndex::with_row_ids(x);
    let q = vec!["0".to_string()];
    let rel = |ids: &[&str]| HashMap::from([("0".to_string(), ids.iter().map(|s| s.to_string()).collect())]);
    assert_eq!(mean_average_precision(&index, &q, &rel(&["1", "2"])).unwrap(), 1.0);
    assert!((mean_average_precision(&index, &q, &rel(&["2"])).unwrap() - 0.5).abs() < 1e-15);
    assert!(mean_average_precision(&index, &q, &rel(&["3"])).unwrap() < 1.0);
    assert!(mean_average_precision(&index, &q, &rel(&[])).is_err());
    assert!(mean_average_precision(&index, &q, &HashMap::new()).is_err());
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn hungarian_matches_exhaustive_permutations() {
    let perms = permutations(6);
    assert_eq!(perms.len(), 720);
    let mut r = rng(5);
    for case in 0..100 {
        let n = r.random_range(6..80);
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..6)).collect();
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..6)).collect();
        let mut counts = [[0usize; 6]; 6];
        for (&p, &t) in pred.iter().zip(&truth) {
            counts[p][t] += 1;
        }
        let best = perms
            .iter()
            .map(|perm| (0..6).map(|c| counts[c][perm[c]]).sum::<usize>())
            .max()
            .unwrap();
        let got = hungarian_accuracy(&pred, &truth).unwrap();
        assert_eq!(got, best as f64 / n as f64, "case {case}");
    }
}

#[test]
fn hungarian_absorbs_relabeling() {
    let mut r = rng(6);
    let truth: Vec<usize> = (0..90).map(|_| r.random_range(0..5)).collect();
    assert_eq!(hungarian_accuracy(&truth, &truth).unwrap(), 1.0);
    let mut perm: Vec<usize> = (0..5).collect();
    perm.shuffle(&mut r);
    let relabeled: Vec<usize> = truth.iter().map(|&t| perm[t] + 10).collect();
    assert_eq!(hungarian_accuracy(&relabeled, &truth).unwrap(), 1.0);
    assert!(hungarian_accuracy(&truth[..3], &truth).is_err());
}

#[test]
fn kmeans_distinct_points_each_own_center() {
    let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![5.0, 1.0], vec![-3.0, 7.0], vec![2.0, -4.0]]).unwrap();
    let a = kmeans(&x, 4, 0, 10).unwrap();
    assert_eq!(a.inertia, 0.0);
    let mut labels = a.labels.clone();
    labels.sort_unstable();
    assert_eq!(labels, [0, 1, 2, 3]);
    assert!(kmeans(&x, 5, 0, 10).is_err());
}

#[test]
fn kmeans_separates_blobs_and_is_deterministic() {
    for seed in 0..3 {
        let (x, truth) = gaussian_blobs(2, 100, 8, 10.0, seed);
        let a = kmeans(&x, 2, seed, 10).unwrap();
        assert_eq!(hungarian_accuracy(&a.labels, &truth).unwrap(), 1.0);
        assert_eq!(kmeans(&x, 2, seed, 10).unwrap(), a);
        assert!(a.history.windows(2).all(|w| w[1] <= w[0]), "{:?}", a.history);
        let direct: f64 = x
            .iter_rows()
            .map(|row| {
                (0..2)
                    .map(|c| {
                        row.iter()
                            .zip(a.centers.row(c))
                            .map(|(p, q)| (p - q) * (p - q))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        assert!((a.inertia - direct).abs() < 1e-9);
        assert!(a.labels.iter().all(|&l| l < 2));
    }
}

fn no_ops_config() -> AugmentConfig {
    AugmentConfig {
        enabled: EnabledOps::none(),
        ..AugmentConfig::default()
    }
}

#[test]
fn pair_retrieval_identical_pairs_score_one() {
    let images = textured_sources(12, 24, 3);
    let report = pair_retrieval_eval(&PixelEmbedder, &images, &no_ops_config(), &[1, 5], 0).unwrap();
    assert_eq!(report.pooled, 24);
    assert_eq!(report.top(1), Some(1.0));
    assert_eq!(report.top(5), Some(1.0));
}

#[test]
fn pair_retrieval_pools_both_copies() {
    let images = textured_sources(512, 8, 4);
    let stub = RandomEmbedder { dim: 8, seed: 1 };
    let report = pair_retrieval_eval(&stub, &images, &AugmentConfig::default(), &[1, 10], 0).unwrap();
    assert_eq!((report.n_sources, report.pooled), (512, 1024));
    assert!(report.top(10).unwrap() >= report.top(1).unwrap());
    assert!(pair_retrieval_eval(&stub, &images[..1], &AugmentConfig::default(), &[1], 0).is_err());
}

#[test]
fn pair_retrieval_counts_ranks_with_ties_by_row() {
    // Rows 0/2 and 1/3 are pairs; row 1 sits exactly between 0 and 2.
    let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![1.0]]).unwrap();
    let r = pair_retrieval_from_embeddings(&x, &[1, 2]).unwrap();
    // Item 0: counterpart 2 at distance 2, items 1 and 3 closer → miss at k=2.
    // Item 1: counterpart 3 at 0 → hit. Item 2: same as item 0. Item 3: hit.
    assert_eq!(r.top(1), Some(0.5));
    assert_eq!(r.top(2), Some(0.5));
    assert!(pair_retrieval_from_embeddings(&x, &[4]).is_err());
}

#[test]
fn linear_probe_separates_separable_classes() {
    let mut r = rng(7);
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|i| {
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            vec![
                side * r.random_range(0.5..2.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let spec = ProbeSpec {
        n_classes: 2,
        epochs: 30,
        ..ProbeSpec::default()
    };
    let out = train_probe(&x, &labels, &spec).unwrap();
    assert!(out.accuracy >= 0.95, "{out:?}");
    assert_eq!(out.n_test, 40);
    let nonlinear = ProbeSpec {
        kind: ProbeKind::Nonlinear,
        ..spec.clone()
    };
    assert_eq!(nonlinear.hidden, PROBE_HIDDEN);
    assert_eq!(PROBE_HIDDEN, 256);
    assert!(train_probe(&x, &labels, &nonlinear).unwrap().accuracy >= 0.95);
    assert_eq!(train_probe(&x, &labels, &spec).unwrap(), out);
}

#[test]
fn probe_on_shuffled_labels_is_at_chance() {
    let mut r = rng(8);
    let (x, _) = gaussian_blobs(4, 250, 8, 6.0, 3);
    let classes = 4;
    let mut total_hits = 0.0;
    let mut total_test = 0.0;
    for seed in 0..5 {
        let labels: Vec<usize> = (0..x.rows()).map(|_| r.random_range(0..classes)).collect();
        let spec = ProbeSpec {
            n_classes: classes,
            epochs: 20,
            seed,
            ..ProbeSpec::default()
        };
        let out = train_probe(&x, &labels, &spec).unwrap();
        total_hits += out.accuracy * out.n_test as f64;
        total_test += out.n_test as f64;
    }
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / total_test).sqrt();
    let acc = total_hits / total_test;
    assert!((acc - p).abs() < 3.0 * sigma, "{acc} vs {p} ± {sigma}");
}

#[test]
fn probe_rejects_degenerate_input() {
    let x = Matrix::zeros(20, 2);
    let one_class = vec![0usize; 20];
    assert!(train_probe(&x, &one_class, &ProbeSpec::default()).is_err());
    let spec = ProbeSpec {
        n_classes: 1,
        ..ProbeSpec::default()
    };
    let two: Vec<usize> = (0..20).map(|i| i % 2).collect();
    assert!(train_probe(&x, &two, &spec).is_err());
    assert!(train_probe(&Matrix::zeros(5, 2), &two[..5], &ProbeSpec::default()).is_err());
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
#[allow(clippy::needless_range_loop)]
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j].powi(2))
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

#[test]
fn pca_variance_matches_dense_eigensolver() {
    let mut r = rng(9);
    for _ in 0..5 {
        let scales: Vec<f64> = (0..8).map(|i| 3.0 / (1.0 + i as f64)).collect();
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| scales.iter().map(|s| s * r.random_range(-1.0..1.0)).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let n = x.rows() as f64;
        let mean: Vec<f64> = (0..8).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let cov: Vec<Vec<f64>> = (0..8)
            .map(|a| {
                (0..8)
                    .map(|b| rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1.0))
                    .collect()
            })
            .collect();
        let ev = jacobi_eigenvalues(cov);
        let p = pca_project(&x).unwrap();
        let var: f64 = (0..2)
            .map(|c| p.coords.iter_rows().map(|row| row[c] * row[c]).sum::<f64>() / (n - 1.0))
            .sum();
        assert!((var - (ev[0] + ev[1])).abs() < 1e-6, "{var} vs {}", ev[0] + ev[1]);
        for v in &p.components {
            let lead = v
                .iter()
                .cloned()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
        }
    }
}

#[test]
fn pca_preserves_planar_distances_and_duplicates() {
    let mut r = rng(10);
    let (u, v) = ([0.6, 0.0, 0.8, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0, 0.0]);
    let mut rows: Vec<Vec<f64>> = (0..30)
        .map(|_| {
            let (a, b) = (r.random_range(-5.0..5.0), r.random_range(-1.0..1.0));
            (0..5).map(|k| a * u[k] + b * v[k] + 1.0).collect()
        })
        .collect();
    rows.push(rows[3].clone());
    let x = Matrix::from_rows(&rows).unwrap();
    let p = pca_project(&x).unwrap().coords;
    assert_eq!(p.row(3), p.row(30));
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            let d_in: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let d_out: f64 = p
                .row(i)
                .iter()
                .zip(p.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!((d_in - d_out).abs() < 1e-6);
        }
    }
    assert!(pca_project(&Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap()).is_err());
    assert!(pca_project(&Matrix::zeros(2, 3)).is_err());
}
