//! Dataset indexing and tiling.
//!
//! Two directory layouts are understood:
//!
//! * `levir` — `root/{train,val,test}/{A,B,label}/<name>.png`
//! * `flat`  — `root/{A,B,label}/<name>.png` (no split directories)
//!
//! `whu` indexes exactly like `flat`; the source imagery there is one huge
//! pair, so tiling (`tile_image`) plus the flat layout stands in for it.
//! A and B must carry identical filename sets; `label/` is optional.

use crate::error::{CdrlError, Result};
use crate::grid::{ImageGrid, PairSample, Provenance, ValueSpace};
use crate::io;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Levir,
    Whu,
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub name: String,
    pub t1_path: PathBuf,
    pub t2_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

/// Immutable, deterministically ordered list of pair records.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<IndexEntry>,
    pub tile_size: usize,
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            names.insert(
                path.file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_string(),
            );
        }
    }
    Ok(names)
}

/// Indexes a pair dataset. Entries are sorted by filename so iteration order
/// is reproducible; shuffles are explicit via [`DatasetIndex::shuffled_indices`].
pub fn index_dataset(root: &Path, layout: Layout, split: Split) -> Result<DatasetIndex> {
    let base = match layout {
        Layout::Levir => root.join(split.dir_name()),
        Layout::Whu | Layout::Flat => root.to_path_buf(),
    };
    let a_dir = base.join("A");
    let b_dir = base.join("B");
    let label_dir = base.join("label");
    if !a_dir.is_dir() || !b_dir.is_dir() {
        return Err(CdrlError::Layout(format!(
            "expected {}/A and {}/B directories",
            base.display(),
            base.display()
        )));
    }
    let a_names = png_names(&a_dir)?;
    let b_names = png_names(&b_dir)?;
    if a_names.is_empty() && b_names.is_empty() {
        return Err(CdrlError::Layout(format!(
            "no PNG pairs under {}",
            base.display()
        )));
    }
    if a_names != b_names {
        let only_a: Vec<_> = a_names.difference(&b_names).cloned().collect();
        let only_b: Vec<_> = b_names.difference(&a_names).cloned().collect();
        return Err(CdrlError::Layout(format!(
            "A/B filename sets differ (only in A: [{}]; only in B: [{}])",
            only_a.join(", "),
            only_b.join(", ")
        )));
    }
    let has_labels = label_dir.is_dir();
    let entries = a_names
        .into_iter()
        .map(|name| {
            let mask_path = if has_labels {
                let p = label_dir.join(&name);
                p.exists().then_some(p)
            } else {
                None
            };
            IndexEntry {
                t1_path: a_dir.join(&name),
                t2_path: b_dir.join(&name),
                mask_path,
                name,
            }
        })
        .collect();
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        entries,
        tile_size: 0,
    })
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Seed-deterministic permutation of entry indices.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        order
    }

    /// Loads one entry as a pair in the given space.
    pub fn load_pair(
        &self,
        i: usize,
        space: ValueSpace,
        provenance: Provenance,
    ) -> Result<PairSample> {
        let e = &self.entries[i];
        let t1 = io::load_image(&e.t1_path, space)?;
        let t2 = io::load_image(&e.t2_path, space)?;
        let mask = match &e.mask_path {
            Some(p) => Some(io::load_mask(p)?),
            None => None,
        };
        PairSample::new(t1, t2, mask, provenance, e.name.clone())
    }
}

/// Anchor offsets that cover `extent` with `tile`-long windows every
/// `stride`; the final window is shifted inward to end exactly at the edge.
fn tile_anchors(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut anchors = Vec::new();
    let mut pos = 0;
    loop {
        if pos + tile >= extent {
            anchors.push(extent - tile);
            break;
        }
        anchors.push(pos);
        pos += stride;
    }
    anchors.dedup();
    anchors
}

/// Cuts `img` into `tile`×`tile` windows with the given stride. Remainder
/// windows are edge-anchored, never padded, so reassembly is exact.
pub fn tile_image(
    img: &ImageGrid,
    tile: usize,
    stride: usize,
) -> Result<Vec<(ImageGrid, (usize, usize))>> {
    if tile == 0 || tile > img.height() || tile > img.width() {
        return Err(CdrlError::Size(format!(
            "tile {tile} exceeds image extent {}x{}",
            img.height(),
            img.width()
        )));
    }
    if stride == 0 || stride > tile {
        // stride > tile cannot cover the image, which the contract requires.
        return Err(CdrlError::Size(format!(
            "stride {stride} must be in [1, tile={tile}]"
        )));
    }
    let ys = tile_anchors(img.height(), tile, stride);
    let xs = tile_anchors(img.width(), tile, stride);
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y0 in &ys {
        for &x0 in &xs {
            let mut t = ImageGrid::zeros(tile, tile, img.channels(), img.space());
            for c in 0..img.channels() {
                for dy in 0..tile {
                    for dx in 0..tile {
                        t.set(c, dy, dx, img.get(c, y0 + dy, x0 + dx));
                    }
                }
            }
            out.push((t, (y0, x0)));
        }
    }
    Ok(out)
}

/// Writes tiles back at their coordinates; overlapping regions take the last
/// tile in iteration order.
pub fn untile_image(
    tiles: &[(ImageGrid, (usize, usize))],
    height: usize,
    width: usize,
) -> Result<ImageGrid> {
    let first = tiles
        .first()
        .ok_or_else(|| CdrlError::Size("no tiles to reassemble".into()))?;
    let channels = first.0.channels();
    let space = first.0.space();
    let mut out = ImageGrid::zeros(height, width, channels, space);
    for (t, (y0, x0)) in tiles {
        for c in 0..channels {
            for dy in 0..t.height() {
                for dx in 0..t.width() {
                    out.set(c, y0 + dy, x0 + dx, t.get(c, dy, dx));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn write_png(path: &Path, w: u32, h: u32, v: u8) {
        image::GrayImage::from_pixel(w, h, image::Luma([v])).save(path).unwrap();
    }

    fn make_flat_root(dir: &Path, names: &[&str], with_labels: bool) {
        for sub in ["A", "B"] {
            std::fs::create_dir_all(dir.join(sub)).unwrap();
        }
        if with_labels {
            std::fs::create_dir_all(dir.join("label")).unwrap();
        }
        for name in names {
            write_png(&dir.join("A").join(name), 4, 4, 10);
            write_png(&dir.join("B").join(name), 4, 4, 20);
            if with_labels {
                image::GrayImage::from_pixel(4, 4, image::Luma([0]))
                    .save(dir.join("label").join(name))
                    .unwrap();
            }
        }
    }

    #[test]
    fn flat_layout_indexes_sorted_with_masks() {
        let dir = tempdir().unwrap();
        make_flat_root(dir.path(), &["b.png", "a.png", "c.png"], true);
        let idx = index_dataset(dir.path(), Layout::Flat, Split::Test).unwrap();
        let names: Vec<_> = idx.entries.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["a.png", "b.png", "c.png"]);
        assert!(idx.entries.iter().all(|e| e.mask_path.is_some()));

        let pair = idx.load_pair(0, ValueSpace::Unit, Provenance::Real).unwrap();
        assert_eq!(pair.t1.channels(), 3);
        assert!(pair.mask.is_some());
    }

    #[test]
    fn empty_or_mismatched_dirs_fail() {
        let dir = tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("A")).unwrap();
        std::fs::create_dir_all(dir.path().join("B")).unwrap();
        assert!(matches!(
            index_dataset(dir.path(), Layout::Flat, Split::Test),
            Err(CdrlError::Layout(_))
        ));
        write_png(&dir.path().join("A").join("x.png"), 2, 2, 0);
        let err = index_dataset(dir.path(), Layout::Flat, Split::Test).unwrap_err();
        match err {
            CdrlError::Layout(msg) => assert!(msg.contains("x.png"), "message should list offenders: {msg}"),
            other => panic!("expected Layout error, got {other:?}"),
        }
    }

    #[test]
    fn levir_layout_uses_split_dirs() {
        let dir = tempdir().unwrap();
        make_flat_root(&dir.path().join("train"), &["p.png"], false);
        make_flat_root(&dir.path().join("val"), &["q.png", "r.png"], false);
        assert_eq!(index_dataset(dir.path(), Layout::Levir, Split::Train).unwrap().len(), 1);
        assert_eq!(index_dataset(dir.path(), Layout::Levir, Split::Val).unwrap().len(), 2);
        assert!(index_dataset(dir.path(), Layout::Levir, Split::Test).is_err());
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        let dir = tempdir().unwrap();
        make_flat_root(dir.path(), &["a.png", "b.png", "c.png", "d.png", "e.png"], false);
        let idx = index_dataset(dir.path(), Layout::Flat, Split::Train).unwrap();
        assert_eq!(idx.shuffled_indices(7), idx.shuffled_indices(7));
        assert_ne!(idx.shuffled_indices(7), idx.shuffled_indices(8));
    }

    #[test]
    fn exact_division_tiling() {
        let img = ImageGrid::zeros(1024, 1024, 1, ValueSpace::Unit);
        let tiles = tile_image(&img, 256, 256).unwrap();
        assert_eq!(tiles.len(), 16);
    }

    #[test]
    fn remainder_tiles_are_edge_anchored() {
        // 300 with tile 256 stride 256 → anchors {0, 44} per axis.
        let img = ImageGrid::zeros(300, 300, 1, ValueSpace::Unit);
        let tiles = tile_image(&img, 256, 256).unwrap();
        assert_eq!(tiles.len(), 4);
        let coords: Vec<_> = tiles.iter().map(|(_, c)| *c).collect();
        assert_eq!(coords, [(0, 0), (0, 44), (44, 0), (44, 44)]);
    }

    #[test]
    fn oversize_tile_rejected() {
        let img = ImageGrid::zeros(1024, 1024, 1, ValueSpace::Unit);
        assert!(matches!(tile_image(&img, 2048, 256), Err(CdrlError::Size(_))));
        assert!(matches!(tile_image(&img, 256, 0), Err(CdrlError::Size(_))));
        assert!(matches!(tile_image(&img, 256, 300), Err(CdrlError::Size(_))));
    }

    proptest! {
        #[test]
        fn tiling_reassembles_exactly(
            h in 8usize..70,
            w in 8usize..70,
            tile in 4usize..16,
            stride in 1usize..16,
            seed in 0u64..1000,
        ) {
            prop_assume!(tile <= h && tile <= w && stride <= tile);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..h * w).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
            let img = ImageGrid::new(h, w, 1, ValueSpace::Unit, data).unwrap();
            let tiles = tile_image(&img, tile, stride).unwrap();
            // Tiles cover the image and reassembly is exact (overlaps copy
            // identical source pixels, so order does not matter).
            let back = untile_image(&tiles, h, w).unwrap();
            prop_assert_eq!(back.data(), img.data());
        }
    }
}
