use mme_core::experts::*;
use mme_core::gate::argmax;
use mme_core::mesh::{Dataset, Mesh};
use mme_core::metrics::edge_accuracy;
use mme_core::synth::{generate_classification_set, generate_segmentation_set_with};

fn tri(id: String, class: usize) -> Mesh {
    Mesh::new(id, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap().with_class(class)
}

#[test]
fn oracle_accuracy_matches_closed_form() {
    // Perfect on its own class, uniform-random one-hot elsewhere:
    // (1 + 1/3 + 1/3) / 3 = 5/9 on balanced classes.
    let meshes: Vec<Mesh> = (0..12_000).map(|i| tri(format!("m{i}"), i % 3)).collect();
    let oracle = ScriptedOracle::new(3, 1, 1.0, OffSpecialty::RandomOneHot, 42).unwrap();
    let mut hits = [0usize; 3];
    for m in &meshes {
        let p = oracle.predict(m).unwrap();
        if argmax(&p) == m.class_label.unwrap() {
            hits[m.class_label.unwrap()] += 1;
        }
    }
    assert_eq!(hits[1], 4000);
    let acc = hits.iter().sum::<usize>() as f64 / meshes.len() as f64;
    assert!((acc - 5.0 / 9.0).abs() < 0.02, "{acc}");
}

#[test]
fn partial_accuracy_oracle() {
    let meshes: Vec<Mesh> = (0..10_000).map(|i| tri(format!("x{i}"), 0)).collect();
    let oracle = ScriptedOracle::new(4, 0, 0.6, OffSpecialty::Uniform, 1).unwrap();
    let exact = meshes.iter().filter(|m| oracle.predict(m).unwrap()[0] == 1.0).count() as f64 / 1e4;
    assert!((exact - 0.6).abs() < 0.02, "{exact}");
}

fn check_normalized(ex: &Expert, ds: &Dataset) {
    for m in &ds.meshes {
        let p = ex.predict(m, 0).unwrap();
        for r in 0..p.rows {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9 && p.row(r).iter().all(|v| *v >= 0.0), "{} on {}", ex.name, m.id);
        }
    }
}

#[test]
fn outputs_are_normalized_on_generated_meshes() {
    let cls = generate_classification_set(10, 4, 2).unwrap();
    for ex in build_experts(&["walk_rnn", "face_mlp", "edge_seg", "oracle:3:0.5"], 10, 16, 1).unwrap() {
        check_normalized(&ex, &cls);
    }
    let seg = generate_segmentation_set_with(4, &[2, 3], 0).unwrap();
    for ex in build_experts(&["edge_seg"], 3, 16, 1).unwrap() {
        check_normalized(&ex, &seg);
        assert_eq!(ex.predict(&seg.meshes[0], 0).unwrap().rows, seg.meshes[0].edges.len());
        assert_eq!(ex.predict(&seg.meshes[0], 0).unwrap(), ex.predict(&seg.meshes[0], 5).unwrap());
    }
}

#[test]
fn trainable_experts_lower_their_training_loss() {
    let ds = generate_classification_set(3, 20, 5).unwrap();
    let train = ds.train_meshes();
    for id in ["walk_rnn", "face_mlp"] {
        let mut ex = build_experts(&[id], 3, DEFAULT_HIDDEN, 7).unwrap().remove(0);
        let cfg = SupervisedConfig { epochs: 5, lr: 1e-2, batch_size: 4, seed: 3 };
        let h = pretrain_expert(&mut ex, &train, &cfg).unwrap();
        // Walks are redrawn every epoch, so epoch means are noisy: require a
        // falling least-squares trend and a lower final epoch.
        let n = h.len() as f64;
        let mx = (n - 1.0) / 2.0;
        let my = h.iter().sum::<f64>() / n;
        let slope: f64 = h.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
        assert!(slope < 0.0 && h[h.len() - 1] < h[0], "{id}: {h:?}");
    }
}

#[test]
fn edge_segmenter_learns_a_mid_height_split() {
    for seed in 0..3 {
        let ds = generate_segmentation_set_with(20, &[2], seed).unwrap();
        let mut ex = build_experts(&["edge_seg"], 2, DEFAULT_HIDDEN, seed).unwrap().remove(0);
        let cfg = SupervisedConfig { epochs: 40, lr: 1e-2, batch_size: 8, seed };
        pretrain_expert(&mut ex, &ds.train_meshes(), &cfg).unwrap();
        let mut total = 0.0;
        for m in ds.test_meshes() {
            let p = ex.predict(m, 0).unwrap();
            let pred: Vec<usize> = (0..p.rows).map(|r| argmax(p.row(r))).collect();
            let lengths: Vec<f64> = m.edges.iter().map(|e| e.length).collect();
            total += edge_accuracy(&pred, m.edge_labels.as_ref().unwrap(), &lengths).unwrap();
        }
        let acc = total / ds.test.len() as f64;
        assert!(acc > 0.85, "seed {seed}: {acc}");
    }
}
