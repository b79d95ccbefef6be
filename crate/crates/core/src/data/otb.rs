//! Loader for the standard benchmark sequence layout:
//! `<seq>/img/*.jpg|png` plus `<seq>/groundtruth_rect.txt` with one
//! corner-form "x,y,w,h" line per frame (comma, tab, or space separated).

use super::{FrameSource, SequenceRecord};
use crate::error::{Error, Result};
use crate::geometry::parse_rect_line;
use std::path::{Path, PathBuf};

fn is_frame_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("jpg") | Some("jpeg") | Some("png")
    )
}

/// Load one sequence directory. Frames sort lexicographically; the box count
/// must match the frame count. Lines whose fields are all NaN (the
/// target-absent convention some annotation files use) become gaps; other
/// malformed lines are errors. Boxes are clamped to the frame bounds (taken
/// from the first image's header); boxes that vanish after clamping become
/// gaps too.
pub fn load_otb_sequence(dir: &Path) -> Result<SequenceRecord> {
    let img_dir = dir.join("img");
    let gt_path = dir.join("groundtruth_rect.txt");
    let mut frames: Vec<PathBuf> = std::fs::read_dir(&img_dir)
        .map_err(|e| Error::io(img_dir.display().to_string(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| is_frame_file(p))
        .collect();
    frames.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    if frames.is_empty() {
        return Err(Error::Parse {
            path: img_dir.display().to_string(),
            msg: "no .jpg/.png frames found".into(),
        });
    }

    let text = std::fs::read_to_string(&gt_path)
        .map_err(|e| Error::io(gt_path.display().to_string(), e))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != frames.len() {
        return Err(Error::Parse {
            path: gt_path.display().to_string(),
            msg: format!(
                "{} ground-truth lines but {} frames",
                lines.len(),
                frames.len()
            ),
        });
    }

    let (fw, fh) = image::image_dimensions(&frames[0]).map_err(|e| Error::Image {
        path: frames[0].display().to_string(),
        msg: e.to_string(),
    })?;
    let (fw, fh) = (fw as f64, fh as f64);

    let mut boxes = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let is_gap = line
            .split(|c: char| c == ',' || c == '\t' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .all(|f| f.eq_ignore_ascii_case("nan"));
        if is_gap {
            boxes.push(None);
            continue;
        }
        let b = parse_rect_line(line).map_err(|msg| Error::Parse {
            path: gt_path.display().to_string(),
            msg: format!("line {}: {msg}", i + 1),
        })?;
        // clamp to frame bounds
        let x1 = b.x1().max(0.0);
        let y1 = b.y1().max(0.0);
        let x2 = b.x2().min(fw);
        let y2 = b.y2().min(fh);
        if x2 - x1 >= 1.0 && y2 - y1 >= 1.0 {
            boxes.push(Some(crate::geometry::BBox::from_corner(
                x1,
                y1,
                x2 - x1,
                y2 - y1,
            )));
        } else {
            boxes.push(None);
        }
    }

    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(SequenceRecord {
        name,
        frames: FrameSource::Files(frames),
        boxes,
    })
}

/// Load every sequence subdirectory under a dataset root (directories
/// containing an `img` subfolder), sorted by name.
pub fn load_otb_root(root: &Path) -> Result<Vec<SequenceRecord>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root.display().to_string(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("img").is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Parse {
            path: root.display().to_string(),
            msg: "no sequence directories (containing img/) found".into(),
        });
    }
    dirs.iter().map(|d| load_otb_sequence(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageBuf;

    fn write_seq(dir: &Path, n_frames: usize, gt_lines: &[&str], ext: &str) -> std::io::Result<()> {
        let img = dir.join("img");
        std::fs::create_dir_all(&img)?;
        for i in 0..n_frames {
            let frame = ImageBuf::new_fill(32, 24, [0.3, 0.5, 0.2]);
            frame
                .save_png(&img.join(format!("{:04}.{ext}", i + 1)))
                .unwrap();
        }
        std::fs::write(dir.join("groundtruth_rect.txt"), gt_lines.join("\n") + "\n")
    }

    #[test]
    fn loads_frames_and_boxes_in_order() {
        let tmp = tempfile::tempdir().unwrap();
        write_seq(tmp.path(), 3, &["1,2,10,8", "2,3,10,8", "3,4,10,8"], "png").unwrap();
        let seq = load_otb_sequence(tmp.path()).unwrap();
        assert_eq!(seq.len(), 3);
        let b0 = seq.boxes[0].as_ref().unwrap();
        assert_eq!((b0.x1(), b0.y1(), b0.w, b0.h), (1.0, 2.0, 10.0, 8.0));
        let b2 = seq.boxes[2].as_ref().unwrap();
        assert_eq!(b2.x1(), 3.0);
        let f = seq.frame(1).unwrap();
        assert_eq!((f.w, f.h), (32, 24));
        match &seq.frames {
            FrameSource::Files(paths) => {
                assert!(
                    paths[0].file_name().unwrap().to_str().unwrap()
                        < paths[2].file_name().unwrap().to_str().unwrap()
                );
            }
            _ => panic!("expected file frames"),
        }
    }

    #[test]
    fn tab_and_space_delimiters_accepted() {
        let tmp = tempfile::tempdir().unwrap();
        write_seq(tmp.path(), 2, &["1\t2\t10\t8", "1 2 10 8"], "png").unwrap();
        let seq = load_otb_sequence(tmp.path()).unwrap();
        assert_eq!(seq.len(), 2);
        assert!(seq.boxes.iter().all(|b| b.is_some()));
    }

    #[test]
    fn count_mismatch_is_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_seq(tmp.path(), 3, &["1,2,10,8", "2,3,10,8"], "png").unwrap();
        let err = load_otb_sequence(tmp.path()).unwrap_err();
        assert!(err
            .to_string()
            .contains("2 ground-truth lines but 3 frames"));
    }

    #[test]
    fn malformed_line_is_error_but_nan_is_gap() {
        let tmp = tempfile::tempdir().unwrap();
        write_seq(
            tmp.path(),
            3,
            &["1,2,10,8", "NaN,NaN,NaN,NaN", "3,4,10,8"],
            "png",
        )
        .unwrap();
        let seq = load_otb_sequence(tmp.path()).unwrap();
        assert!(seq.boxes[0].is_some());
        assert!(seq.boxes[1].is_none());
        assert!(seq.boxes[2].is_some());

        let tmp2 = tempfile::tempdir().unwrap();
        write_seq(tmp2.path(), 1, &["1,2,banana,8"], "png").unwrap();
        assert!(load_otb_sequence(tmp2.path()).is_err());
        let tmp3 = tempfile::tempdir().unwrap();
        write_seq(tmp3.path(), 1, &["1,2,8"], "png").unwrap();
        assert!(load_otb_sequence(tmp3.path()).is_err());
    }

    #[test]
    fn boxes_clamped_to_frame() {
        let tmp = tempfile::tempdir().unwrap();
        // frame is 32x24; box hangs off the right edge; second box fully out
        write_seq(tmp.path(), 2, &["28,10,10,10", "200,200,5,5"], "png").unwrap();
        let seq = load_otb_sequence(tmp.path()).unwrap();
        let b = seq.boxes[0].as_ref().unwrap();
        assert_eq!(b.x2(), 32.0);
        assert_eq!(b.w, 4.0);
        assert!(seq.boxes[1].is_none());
    }

    #[test]
    fn missing_pieces_are_errors() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(tmp.path().join("img")).unwrap();
        // no frames at all
        assert!(load_otb_sequence(tmp.path()).is_err());
        // frames but no ground-truth file
        ImageBuf::new_fill(8, 8, [0.1; 3])
            .save_png(&tmp.path().join("img/0001.png"))
            .unwrap();
        assert!(load_otb_sequence(tmp.path()).is_err());
    }

    #[test]
    fn root_loader_finds_all_sequences() {
        let tmp = tempfile::tempdir().unwrap();
        for name in ["seq_b", "seq_a"] {
            write_seq(&tmp.path().join(name), 2, &["1,1,5,5", "2,2,5,5"], "png").unwrap();
        }
        std::fs::create_dir_all(tmp.path().join("not_a_seq")).unwrap();
        let seqs = load_otb_root(tmp.path()).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].name, "seq_a");
        assert_eq!(seqs[1].name, "seq_b");
    }
}
