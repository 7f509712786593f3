//! On-disk dataset layout:
//!
//! ```text
//! <dir>/scenes/<sid>/meta.json
//! <dir>/scenes/<sid>/frames/<fid>/view_<vid>.cvt   [1, H, W] images (f32 payload)
//! <dir>/scenes/<sid>/frames/<fid>/gt.cvt           [1, Hs, Ws] density (f64 payload)
//! <dir>/scenes/<sid>/frames/<fid>/dots.csv         id,x,y world meters
//! ```
//!
//! Scene and frame ids are zero-padded to three digits, view ids to two.
//! Per-view dots are not stored; they are re-derived from the world dots and
//! the cameras on read.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{project_dots, CrowdFrame, Person};
use crate::error::{Error, Result};
use crate::geometry::SceneMeta;
use crate::tensor::cvt::{self, DType};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u32,
    pub meta: SceneMeta,
    pub frames: Vec<CrowdFrame>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.scenes.iter().map(|s| s.frames.len()).sum()
    }

    /// Fewest cameras over all scenes.
    pub fn min_views(&self) -> usize {
        self.scenes
            .iter()
            .map(|s| s.meta.cameras.len())
            .min()
            .unwrap_or(0)
    }
}

/// Scene with images only, as seen by label-free adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledScene {
    pub id: u32,
    pub meta: SceneMeta,
    /// `frames[f][v]` is the `[1, H, W]` image of camera `v`.
    pub frames: Vec<Vec<Tensor>>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct UnlabeledDataset {
    pub scenes: Vec<UnlabeledScene>,
}

impl From<&Dataset> for UnlabeledDataset {
    fn from(d: &Dataset) -> Self {
        UnlabeledDataset {
            scenes: d
                .scenes
                .iter()
                .map(|s| UnlabeledScene {
                    id: s.id,
                    meta: s.meta.clone(),
                    frames: s.frames.iter().map(|f| f.images.clone()).collect(),
                })
                .collect(),
        }
    }
}

/// Records every file opened by the dataset readers.
#[derive(Debug, Default)]
pub struct AccessLog {
    paths: Mutex<Vec<PathBuf>>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, p: &Path) {
        self.paths.lock().unwrap().push(p.to_path_buf());
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.paths.lock().unwrap().clone()
    }

    /// Whether any label file (`gt.cvt`, `dots.csv`) was opened.
    pub fn touched_labels(&self) -> bool {
        self.paths.lock().unwrap().iter().any(|p| {
            matches!(
                p.file_name().and_then(|n| n.to_str()),
                Some("gt.cvt" | "dots.csv")
            )
        })
    }
}

fn scene_dir(root: &Path, id: u32) -> PathBuf {
    root.join("scenes").join(format!("{id:03}"))
}

fn frame_dir(scene: &Path, id: u32) -> PathBuf {
    scene.join("frames").join(format!("{id:03}"))
}

fn view_file(frame: &Path, v: usize) -> PathBuf {
    frame.join(format!("view_{v:02}.cvt"))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_bytes(p: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

pub fn write_scene(root: &Path, scene: &Scene) -> Result<()> {
    let sdir = scene_dir(root, scene.id);
    mkdir(&sdir)?;
    scene.meta.write(&sdir.join("meta.json"))?;
    for f in &scene.frames {
        let fdir = frame_dir(&sdir, f.id);
        mkdir(&fdir)?;
        for (v, img) in f.images.iter().enumerate() {
            write_bytes(&view_file(&fdir, v), &cvt::encode(img, DType::F32))?;
        }
        write_bytes(&fdir.join("gt.cvt"), &cvt::encode(&f.gt, DType::F64))?;
        let mut csv = String::from("id,x,y\n");
        for p in &f.people {
            csv.push_str(&format!("{},{},{}\n", p.id, p.x, p.y));
        }
        write_bytes(&fdir.join("dots.csv"), csv.as_bytes())?;
    }
    Ok(())
}

pub fn write_dataset(root: &Path, data: &Dataset) -> Result<()> {
    mkdir(&root.join("scenes"))?;
    data.scenes.iter().try_for_each(|s| write_scene(root, s))
}

/// Sorted numeric subdirectories of `dir`.
fn numbered_dirs(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name();
        let id = name
            .to_str()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| Error::format(&path, "directory name is not a numeric id"))?;
        out.push((id, path));
    }
    out.sort();
    Ok(out)
}

fn read_logged(p: &Path, log: Option<&AccessLog>) -> Result<Vec<u8>> {
    if let Some(log) = log {
        log.record(p);
    }
    fs::read(p).map_err(|e| Error::io(p, e))
}

fn read_tensor(p: &Path, log: Option<&AccessLog>) -> Result<Tensor> {
    let bytes = read_logged(p, log)?;
    cvt::decode(&bytes).map_err(|m| Error::format(p, m))
}

fn read_meta(sdir: &Path, log: Option<&AccessLog>) -> Result<SceneMeta> {
    let p = sdir.join("meta.json");
    if let Some(log) = log {
        log.record(&p);
    }
    SceneMeta::read(&p)
}

fn read_images(fdir: &Path, meta: &SceneMeta, log: Option<&AccessLog>) -> Result<Vec<Tensor>> {
    meta.cameras
        .iter()
        .enumerate()
        .map(|(v, cam)| {
            let p = view_file(fdir, v);
            let img = read_tensor(&p, log)?;
            if img.shape() != [1, cam.height, cam.width] {
                return Err(Error::format(
                    &p,
                    format!(
                        "image shape {:?} does not match camera {}x{}",
                        img.shape(),
                        cam.height,
                        cam.width
                    ),
                ));
            }
            Ok(img)
        })
        .collect()
}

fn parse_dots(p: &Path, text: &str) -> Result<Vec<Person>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("id,x,y") {
        return Err(Error::format(p, "expected header id,x,y"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            let bad = || Error::format(p, format!("line {}: malformed row {l:?}", n + 2));
            let mut it = l.split(',');
            let id = it
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(bad)?;
            let x = it
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(bad)?;
            let y = it
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(bad)?;
            if it.next().is_some() {
                return Err(bad());
            }
            Ok(Person { id, x, y })
        })
        .collect()
}

pub fn read_scene(sid: u32, sdir: &Path) -> Result<Scene> {
    let meta = read_meta(sdir, None)?;
    let mut frames = Vec::new();
    for (fid, fdir) in numbered_dirs(&sdir.join("frames"))? {
        let images = read_images(&fdir, &meta, None)?;
        let gt_path = fdir.join("gt.cvt");
        let gt = read_tensor(&gt_path, None)?;
        if gt.shape() != [1, meta.grid.hs, meta.grid.ws] {
            return Err(Error::format(&gt_path, "density shape does not match grid"));
        }
        let dots_path = fdir.join("dots.csv");
        let text = String::from_utf8(read_logged(&dots_path, None)?)
            .map_err(|_| Error::format(&dots_path, "not UTF-8"))?;
        let people = parse_dots(&dots_path, &text)?;
        let dots = meta
            .cameras
            .iter()
            .map(|c| project_dots(c, &people, meta.grid.h_avg))
            .collect();
        frames.push(CrowdFrame {
            id: fid,
            people,
            images,
            dots,
            gt,
        });
    }
    Ok(Scene {
        id: sid,
        meta,
        frames,
    })
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let scenes = numbered_dirs(&root.join("scenes"))?
        .into_iter()
        .map(|(sid, sdir)| read_scene(sid, &sdir))
        .collect::<Result<Vec<_>>>()?;
    if scenes.is_empty() {
        return Err(Error::format(root, "dataset has no scenes"));
    }
    Ok(Dataset { scenes })
}

/// Reads cameras and images only; label files are never opened. Every
/// opened path is recorded in `log`.
pub fn read_unlabeled(root: &Path, log: &AccessLog) -> Result<UnlabeledDataset> {
    let mut scenes = Vec::new();
    for (sid, sdir) in numbered_dirs(&root.join("scenes"))? {
        let meta = read_meta(&sdir, Some(log))?;
        let frames = numbered_dirs(&sdir.join("frames"))?
            .into_iter()
            .map(|(_, fdir)| read_images(&fdir, &meta, Some(log)))
            .collect::<Result<Vec<_>>>()?;
        scenes.push(UnlabeledScene {
            id: sid,
            meta,
            frames,
        });
    }
    if scenes.is_empty() {
        return Err(Error::format(root, "dataset has no scenes"));
    }
    Ok(UnlabeledDataset { scenes })
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, SceneSpec};
    use super::*;

    fn tiny() -> Dataset {
        let spec = SceneSpec {
            extent: 16.0,
            people: (3, 6),
            n_views: 3,
            n_frames: 2,
            image: (32, 24),
            mpp: 1.0,
            sigma: 1.0,
            ..SceneSpec::default()
        };
        generate_dataset(&spec, 2, 5).unwrap()
    }

    #[test]
    fn roundtrip() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn dots_csv_rows_match_people() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let text = fs::read_to_string(dir.path().join("scenes/001/frames/001/dots.csv")).unwrap();
        assert_eq!(text.lines().count() - 1, d.scenes[1].frames[1].people.len());
    }

    #[test]
    fn missing_gt_names_the_frame() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        fs::remove_file(dir.path().join("scenes/000/frames/001/gt.cvt")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("scenes/000/frames/001/gt.cvt"), "{err}");
    }

    #[test]
    fn malformed_csv_is_reported() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let p = dir.path().join("scenes/000/frames/000/dots.csv");
        fs::write(&p, "id,x,y\n1,2\n").unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("dots.csv") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn unlabeled_read_never_opens_labels() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let log = AccessLog::new();
        let u = read_unlabeled(dir.path(), &log).unwrap();
        assert_eq!(u, UnlabeledDataset::from(&d));
        assert!(!log.touched_labels());
        assert!(!log.paths().is_empty());
        // and it works with the labels gone
        for s in &d.scenes {
            for f in &s.frames {
                let fdir = frame_dir(&scene_dir(dir.path(), s.id), f.id);
                fs::remove_file(fdir.join("gt.cvt")).unwrap();
                fs::remove_file(fdir.join("dots.csv")).unwrap();
            }
        }
        assert!(read_unlabeled(dir.path(), &AccessLog::new()).is_ok());
    }
}
