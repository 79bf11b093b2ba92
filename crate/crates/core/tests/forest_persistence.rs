mod common;

use std::sync::Arc;

use catpose::forest::{train_forest, train_tree, tree_seed, Forest, ForestError, TreeNode};
use catpose::skeleton::LinkAngleVector;
use catpose::QualityMask;
use common::single_table;

#[test]
fn same_inputs_give_byte_identical_files() {
    let t = single_table(1, 10, 4.0);
    let (a, _) = train_forest(&t.set, &t.cfg.forest).unwrap();
    let (b, _) = train_forest(&t.set, &t.cfg.forest).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.forest"), dir.path().join("b.forest"));
    a.save(&pa).unwrap();
    b.save(&pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

    let mut other = t.cfg.forest;
    other.seed += 1;
    let (c, _) = train_forest(&t.set, &other).unwrap();
    assert_ne!(c.trees, a.trees);
}

#[test]
fn round_trip_resaves_identically() {
    let t = single_table(2, 8, 4.0);
    let (forest, _) = train_forest(&t.set, &t.cfg.forest).unwrap();
    let bytes = forest.to_bytes();
    let loaded = Forest::from_bytes(&bytes).unwrap();
    assert_eq!(loaded, forest);
    assert_eq!(loaded.to_bytes(), bytes);
}

#[test]
fn damaged_files_are_rejected() {
    let t = single_table(2, 6, 4.0);
    let (forest, _) = train_forest(&t.set, &t.cfg.forest).unwrap();
    let bytes = forest.to_bytes();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(Forest::from_bytes(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Forest::from_bytes(&flipped), Err(ForestError::Corrupt(_))));
    let mut versioned = bytes.clone();
    versioned[4] = 99;
    assert!(matches!(Forest::from_bytes(&versioned), Err(ForestError::Version(_))));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(Forest::from_bytes(&magic), Err(ForestError::Version(_))));
}

#[test]
fn file_holds_only_splits_and_votes() {
    // Byte accounting: header, then per tree a node count and fixed-size
    // split or leaf records. Nothing is left over for skeleton features.
    let t = single_table(4, 10, 4.0);
    let (forest, _) = train_forest(&t.set, &t.cfg.forest).unwrap();
    let header = Forest { trees: Vec::new(), ..forest.clone() }.to_bytes().len();
    let body: usize = forest
        .trees
        .iter()
        .map(|tree| {
            4 + tree
                .nodes
                .iter()
                .map(|n| match n {
                    TreeNode::Split { .. } => 1 + 5 * 8 + 2 * 4,
                    TreeNode::Leaf(leaf) => 1 + 4 + 4 + leaf.votes.len() * 6 * 8,
                })
                .sum::<usize>()
        })
        .sum();
    assert_eq!(forest.to_bytes().len(), header + body);
}

#[test]
fn q1_forest_ignores_skeleton_features() {
    let t = single_table(6, 8, 4.0);
    let mut cfg = t.cfg.forest;
    cfg.quality = QualityMask::Q1;
    let (plain, _) = train_forest(&t.set, &cfg).unwrap();

    let mut scrambled = t.set.clone();
    for part in scrambled.instances.iter_mut().flatten() {
        part.link_angles = Arc::new(LinkAngleVector::default());
        for row in &mut part.node_offsets.rows {
            *row = [row[1], -row[0], 2.0 * row[2]];
        }
    }
    let (other, _) = train_forest(&scrambled, &cfg).unwrap();
    assert_eq!(plain.trees, other.trees);
}

#[test]
fn single_tree_forest_matches_train_tree() {
    let t = single_table(8, 6, 4.0);
    let mut cfg = t.cfg.forest;
    cfg.trees = 1;
    cfg.subset_fraction = 1.0;
    let (forest, logs) = train_forest(&t.set, &cfg).unwrap();
    assert_eq!(forest.trees.len(), 1);
    assert_eq!(logs.len(), 1);
    let parts: Vec<_> = t.set.parts().collect();
    assert_eq!(forest.trees[0], train_tree(&parts, &cfg, tree_seed(cfg.seed, 0)));
    assert!(forest.trees[0].depth() <= cfg.max_depth);
}
