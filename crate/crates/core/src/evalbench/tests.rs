use super::*;
use crate::groups::FnClassifier;

fn people(group_sizes: &[(u32, usize, usize)]) -> GroupedPeople {
    let mut out = GroupedPeople::new();
    for &(g, n, k) in group_sizes {
        out.insert(
            g,
            (0..n).map(|p| Person { id: format!("g{g}p{p}"), images: (0..k).map(|i| format!("g{g}/p{p}/{i}.png")).collect() }).collect(),
        );
    }
    out
}

#[test]
fn consensus_cases() {
    let by_value = FnClassifier::new(4, |v: &u32| *v);
    let mut rng = seeding::rng(1);
    assert_eq!(consensus_group(&[2u32; 13], &by_value, &mut rng), None);
    assert_eq!(consensus_group(&[2u32; 14], &by_value, &mut rng), Some(2));

    let mut photos = vec![2u32; 16];
    photos.extend([1u32; 4]);
    assert_eq!(consensus_group(&photos, &by_value, &mut rng), Some(2));
    let mut photos = vec![2u32; 15];
    photos.extend([1u32; 5]);
    assert_eq!(consensus_group(&photos, &by_value, &mut rng), None);

    // Any 20 of 30 photos: a classifier that alternates its answer splits 10/10.
    let calls = std::cell::Cell::new(0u32);
    let split = FnClassifier::new(4, |_: &u32| {
        calls.set(calls.get() + 1);
        1 + calls.get() % 2
    });
    assert_eq!(consensus_group(&[0u32; 30], &split, &mut rng), None);
    assert_eq!(calls.get(), 20);
}

#[test]
fn consensus_is_seeded_and_monotone() {
    let by_value = FnClassifier::new(4, |v: &u32| *v);
    let mut photos: Vec<u32> = (0..40).map(|i| if i % 7 == 0 { 1 } else { 3 }).collect();
    let a = consensus_group(&photos, &by_value, &mut seeding::rng(4));
    assert_eq!(a, consensus_group(&photos, &by_value, &mut seeding::rng(4)));
    assert_eq!(a, Some(3));
    photos.extend([3u32; 10]);
    for s in 0..20 {
        assert_eq!(consensus_group(&photos, &by_value, &mut seeding::rng(s)), Some(3));
    }
}

#[test]
fn rbweb_counts() {
    let g = people(&[(1, 120, 5), (2, 100, 4)]);
    let p = build_rbweb_protocol(&g, 100, 5, 7).unwrap();
    for grp in [1, 2] {
        assert_eq!(p.positives.iter().filter(|x| x.group == grp).count(), 500);
        assert_eq!(p.negative_count(grp), 4950);
    }
    // Oracle: expand the descriptor and count distinct cross-person pairs.
    let d = &p.implicit_negatives[0];
    let owner = |img: &str| img.split('/').nth(1).unwrap().to_string();
    let expanded: BTreeSet<(String, String)> = d.pairs().map(|(i, j)| unordered(&d.representative_images[i], &d.representative_images[j])).collect();
    assert_eq!(expanded.len(), 4950);
    assert!(expanded.iter().all(|(a, b)| owner(a) != owner(b)));

    let uniq: BTreeSet<(String, String)> = p.positives.iter().map(|x| unordered(&x.a, &x.b)).collect();
    assert_eq!(uniq.len(), p.positives.len());
    assert!(p.positives.iter().all(|x| x.a != x.b && owner(&x.a) == owner(&x.b)));
    assert_eq!(p, build_rbweb_protocol(&g, 100, 5, 7).unwrap());

    let one = build_rbweb_protocol(&people(&[(3, 1, 4)]), 1, 5, 1).unwrap();
    assert_eq!(one.negative_count(3), 0);
    match build_rbweb_protocol(&people(&[(4, 10, 3)]), 5, 5, 1) {
        Err(Error::Protocol { group: 4, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn positives_spread_the_first_element() {
    let g = people(&[(1, 1, 6)]);
    let p = build_rbweb_protocol(&g, 1, 5, 3).unwrap();
    let firsts: BTreeSet<&String> = p.positives.iter().map(|x| &x.a).collect();
    assert_eq!(firsts.len(), 5);
}

#[test]
fn rfw_style_counts_and_mining() {
    let g = people(&[(1, 40, 4), (2, 40, 4), (3, 40, 4), (4, 40, 4)]);
    let random_sim = |_: &str, _: &str| 0.0;
    let p = build_rfw_style_protocol(&g, 30, 5, &random_sim, 1).unwrap();
    assert_eq!(p.positives.len() + p.negatives.len(), 4 * 60);
    let all: Vec<(String, String)> = p.positives.iter().chain(&p.negatives).map(|x| unordered(&x.a, &x.b)).collect();
    let uniq: BTreeSet<_> = all.iter().cloned().collect();
    assert_eq!(uniq.len(), all.len());

    // A similarity that prefers one person: mined negatives concentrate on it.
    let sim = |a: &str, b: &str| (a.contains("/p0/") || b.contains("/p0/")) as u8 as f64;
    let p = build_rfw_style_protocol(&g, 20, 10, &sim, 2).unwrap();
    let with_p0 = p.negatives.iter().filter(|x| x.a.contains("/p0/") || x.b.contains("/p0/")).count();
    assert!(with_p0 > 20, "{with_p0}");
    assert!(build_rfw_style_protocol(&people(&[(1, 3, 2)]), 10, 2, &random_sim, 1).is_err());
}

#[test]
fn rfw_style_full_scale_pair_total() {
    let g = people(&[(1, 400, 10), (2, 400, 10), (3, 400, 10), (4, 400, 10)]);
    let p = build_rfw_style_protocol(&g, 3000, 3, &|_: &str, _: &str| 0.0, 5).unwrap();
    assert_eq!(p.positives.len() + p.negatives.len(), 24_000);
}

fn table(n_people: usize, per: usize, dim: usize, seed: u64) -> (GroupedPeople, EmbeddingTable) {
    let g = people(&[(1, n_people, per)]);
    let ids: Vec<String> = g[&1].iter().flat_map(|p| p.images.clone()).collect();
    let mut rng = seeding::rng(seed);
    let rows = Array2::from_shape_simple_fn((ids.len(), dim), || rng.random_range(-1.0..1.0));
    (g, EmbeddingTable::new(ids, rows))
}

#[test]
fn scoring_contract() {
    let (g, t) = table(10, 4, 8, 1);
    let mut p = build_rbweb_protocol(&g, 10, 3, 2).unwrap();
    p.positives.push(Pair { a: "g1/p0/0.png".into(), b: "g1/p0/0.png".into(), group: 1 });
    let whole = score_pairs(&t, &p, usize::MAX).unwrap();
    for chunk in [1, 7, 45] {
        let s = score_pairs(&t, &p, chunk).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&s[&1].negatives), bits(&whole[&1].negatives));
        assert_eq!(bits(&s[&1].positives), bits(&whole[&1].positives));
    }
    let s = &whole[&1];
    assert_eq!(s.negatives.len(), 45);
    assert!((s.positives.last().unwrap() - 1.0).abs() < 1e-6);
    assert!(s.positives.iter().chain(&s.negatives).all(|v| (-1.0..=1.0).contains(v)));
    assert!(score_pairs(&t, &p, 0).is_err());

    p.negatives.push(Pair { a: "g1/p0/0.png".into(), b: "nowhere.png".into(), group: 1 });
    match score_pairs(&t, &p, 4) {
        Err(Error::Scoring { b, .. }) => assert_eq!(b, "nowhere.png"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn embedding_table_build_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let ids: Vec<String> = (0..5).map(|i| format!("img{i}")).collect();
    let load = |id: &str| {
        if id == "img3" {
            Err(Error::Argument("unreadable".into()))
        } else {
            Ok(image::RgbImage::from_pixel(2, 2, image::Rgb([id.len() as u8 * 20, 3, 4])))
        }
    };
    let embed = |imgs: &[image::RgbImage]| Array2::from_shape_fn((imgs.len(), 3), |(i, j)| (i + j) as f64 + imgs[i].get_pixel(0, 0)[0] as f64);
    let t = EmbeddingTable::build(&ids, &load, &embed, 2);
    assert_eq!(t.ids.len(), 4);
    assert!(t.failed.contains_key("img3"));
    let err = t.score("img0", "img3").unwrap_err().to_string();
    assert!(err.contains("img3") && err.contains("unreadable"));

    let p = dir.path().join("emb.bin");
    t.save(&p).unwrap();
    let raw = std::fs::read(&p).unwrap();
    assert_eq!(&raw[..4], b"EMB1");
    assert_eq!(u32::from_le_bytes(raw[4..8].try_into().unwrap()), 4);
    assert_eq!(u32::from_le_bytes(raw[8..12].try_into().unwrap()), 3);
    assert_eq!(raw.len(), 16 + 4 * 3 * 4 + t.ids.iter().map(|s| s.len() + 1).sum::<usize>());
    let back = EmbeddingTable::load(&p).unwrap();
    assert_eq!(back.ids, t.ids);
    for (a, b) in back.rows.iter().zip(t.rows.iter()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn protocol_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = people(&[(1, 6, 4), (2, 6, 4)]);
    let mut p = build_rbweb_protocol(&g, 5, 2, 3).unwrap();
    p.negatives.push(Pair { a: "x".into(), b: "y".into(), group: 2 });
    p.save(dir.path(), "pairs").unwrap();
    let text = std::fs::read_to_string(dir.path().join("pairs.tsv")).unwrap();
    assert!(text.lines().all(|l| l.split('\t').count() == 4));
    let desc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("pairs.neg1.json")).unwrap()).unwrap();
    assert!(desc["group_id"].is_u64() && desc["representative_images"].is_array() && desc["seed"].is_u64());
    let back = PairProtocol::load(dir.path(), "pairs").unwrap();
    assert_eq!(back, p);
}

#[test]
fn lfw_accuracy_cases() {
    let pos = vec![0.9; 300];
    let neg = vec![0.1; 300];
    let a = lfw_accuracy(&pos, &neg, 10, 1).unwrap();
    assert_eq!((a.cross_validated, a.best_threshold), (100.0, 100.0));
    let swapped = lfw_accuracy(&neg, &pos, 10, 1).unwrap();
    assert_eq!(swapped.cross_validated, 100.0);

    let mut rng = seeding::rng(2);
    let p: Vec<f64> = (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n: Vec<f64> = (0..3000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let chance = lfw_accuracy(&p, &n, 10, 3).unwrap().cross_validated;
    assert!((chance - 50.0).abs() < 3.0, "{chance}");

    let p: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..1.0)).collect();
    let n: Vec<f64> = (0..500).map(|_| rng.random_range(-0.6..0.4)).collect();
    let a = lfw_accuracy(&p, &n, 10, 4).unwrap();
    let b = lfw_accuracy(&n, &p, 10, 4).unwrap();
    assert_eq!(a.best_threshold, b.best_threshold);
    assert!((a.cross_validated - b.cross_validated).abs() < 3.0);
    assert!(a.cross_validated > 70.0 && a.cross_validated < 100.0);
    assert!(lfw_accuracy(&[], &n, 10, 1).is_err());
    assert!(lfw_accuracy(&p, &n, 1, 1).is_err());
}

fn brute_rates(pos: &[f64], neg: &[f64], t: f64) -> (f64, f64) {
    let tp = pos.iter().filter(|&&s| s >= t).count() as f64 / pos.len() as f64;
    let fp = neg.iter().filter(|&&s| s >= t).count() as f64 / neg.len() as f64;
    (tp, fp)
}

#[test]
fn roc_sweep_matches_brute_force() {
    let mut rng = seeding::rng(5);
    let pos: Vec<f64> = (0..1000).map(|_| rng.random_range(-0.2..1.0)).collect();
    let neg: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..0.6)).collect();
    let c = roc_sweep(&pos, &neg, 0.1, 0.75, 66).unwrap();
    let exact = exact_roc(&pos, &neg).unwrap();
    for (i, &t) in c.thresholds.iter().enumerate() {
        assert_eq!((c.tpr[i], c.fpr[i]), brute_rates(&pos, &neg, t));
        // The swept point sits on the exact curve.
        let j = exact.thresholds.partition_point(|&e| e < t);
        assert_eq!((exact.tpr[j], exact.fpr[j]), (c.tpr[i], c.fpr[i]));
    }
    assert!(c.tpr.windows(2).all(|w| w[1] <= w[0]) && c.fpr.windows(2).all(|w| w[1] <= w[0]));
    let lo = roc_sweep(&pos, &neg, -5.0, -4.0, 2).unwrap();
    assert_eq!((lo.tpr[0], lo.fpr[0]), (1.0, 1.0));
    let hi = roc_sweep(&pos, &neg, 4.0, 5.0, 2).unwrap();
    assert_eq!((hi.tpr[1], hi.fpr[1]), (0.0, 0.0));
    assert!(roc_sweep(&pos, &neg, 0.5, 0.5, 3).is_err());
    assert!(roc_sweep(&[], &neg, 0.1, 0.5, 3).is_err());
}

#[test]
fn tpr_at_fpr_step_cases() {
    let pos: Vec<f64> = (0..50).map(|i| 0.5 + i as f64 * 0.001).collect();
    let mut neg: Vec<f64> = (0..990).map(|i| -0.5 + i as f64 * 1e-4).collect();
    neg.extend((0..10).map(|i| 0.9 + i as f64 * 0.001));
    assert_eq!(tpr_at_fpr(&pos, &neg, 1e-2).unwrap().tpr, 100.0);
    let t = tpr_at_fpr(&pos, &neg, 1e-3).unwrap();
    assert_eq!(t.tpr, 0.0);
    assert!(!t.below_resolution);
    assert!(tpr_at_fpr(&pos, &neg, 1e-4).unwrap().below_resolution);
    assert_eq!(tpr_at_fpr(&[0.9], &[0.1, 0.2], 1e-3).unwrap().tpr, 100.0);
    assert!(tpr_at_fpr(&pos, &neg, 0.0).is_err());

    let mut tail = NegativeTail::new(neg.len() as u64, 1e-2);
    for c in neg.chunks(33) {
        tail.push(c);
    }
    for target in [1e-2, 1e-3, 5e-3] {
        assert_eq!(tail.tpr_at_fpr(&pos, target).unwrap(), tpr_at_fpr(&pos, &neg, target).unwrap());
    }
    assert!(tail.tpr_at_fpr(&pos, 0.5).is_err());
}

#[test]
fn tpr_sweep_mode() {
    let mut rng = seeding::rng(6);
    let pos: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..1.0)).collect();
    let neg: Vec<f64> = (0..5000).map(|_| rng.random_range(-1.0..0.5)).collect();
    let c = roc_sweep(&pos, &neg, 0.1, 0.75, 131).unwrap();
    let s = tpr_at_fpr_sweep(&c, 1e-2, neg.len() as u64).unwrap();
    assert_eq!(s.mode, TprMode::Sweep);
    let i = (0..c.thresholds.len()).find(|&i| c.fpr[i] <= 1e-2).unwrap();
    assert_eq!(s.tpr, c.tpr[i] * 100.0);
    assert!(s.tpr <= tpr_at_fpr(&pos, &neg, 1e-2).unwrap().tpr);
}

#[test]
fn report_statistics() {
    let accs = [96.18, 93.98, 93.72, 94.67];
    let per: BTreeMap<u32, GroupMetrics> = accs.iter().enumerate().map(|(i, &a)| (i as u32 + 1, GroupMetrics { accuracy: Some(a), ..Default::default() })).collect();
    let r = report(per).unwrap();
    assert!((r.avg.unwrap() - 94.64).abs() < 0.01);
    assert!((r.std.unwrap() - 1.11).abs() < 0.01);

    let single = report([(1, GroupMetrics { accuracy: Some(90.0), ..Default::default() })].into()).unwrap();
    assert_eq!(single.std, Some(0.0));
    assert!(report(BTreeMap::new()).is_err());

    let dir = tempfile::tempdir().unwrap();
    r.save(dir.path(), "report").unwrap();
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("group,metric,value,mode\n"));
    assert_eq!(VerificationReport::load(&dir.path().join("report.json")).unwrap(), r);
}

#[test]
fn evaluate_scores_end_to_end() {
    let (g, t) = table(12, 4, 6, 9);
    let p = build_rbweb_protocol(&g, 12, 2, 10).unwrap();
    let s = score_pairs(&t, &p, 16).unwrap();
    let r = evaluate_scores(&s, &[1e-3, 1e-2], 10, 11).unwrap();
    let m = &r.per_group[&1];
    assert!(m.accuracy.is_some() && m.tpr_at_fpr.len() == 2);
    assert!(m.tpr_at_fpr.values().all(|t| t.below_resolution));

    let streamed = evaluate_streaming(&t, &p, &[1e-3, 1e-2], 5).unwrap();
    assert_eq!(streamed.per_group[&1].tpr_at_fpr, m.tpr_at_fpr);
    assert_eq!(streamed.avg, None);
}
