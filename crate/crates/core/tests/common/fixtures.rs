//! Hand-built IDX, NPY and NPZ files, including a corpus of malformed ones, and a PNG reader
//! independent of the writer under test.

use std::io::Write;
use std::path::{Path, PathBuf};

use zip::write::SimpleFileOptions;

use qdiff::data::{load_idx, load_npz, ImageBatch, Split};

pub fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

pub fn pixels(n: usize) -> Vec<u8> {
    (0..n * 784).map(|i| (i * 7 % 256) as u8).collect()
}

pub fn valid_images(n: usize) -> Vec<u8> {
    idx(0x803, &[n as u32, 28, 28], &pixels(n))
}

pub fn valid_labels(labels: &[u8]) -> Vec<u8> {
    idx(0x801, &[labels.len() as u32], labels)
}

pub fn npy(descr: &str, fortran: bool, shape: &[usize], payload: &[u8]) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let shape_txt = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!(
        "{{'descr': '{descr}', 'fortran_order': {}, 'shape': {shape_txt}, }}",
        if fortran { "True" } else { "False" }
    );
    while (10 + header.len() + 1) % 64 != 0 {
        header.push(' ');
    }
    header.push('\n');
    let mut out = b"\x93NUMPY\x01\x00".to_vec();
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(payload);
    out
}

pub fn npz(entries: &[(&str, Vec<u8>)]) -> Vec<u8> {
    let mut w = zip::ZipWriter::new(std::io::Cursor::new(Vec::new()));
    for (name, bytes) in entries {
        w.start_file(*name, SimpleFileOptions::default()).unwrap();
        w.write_all(bytes).unwrap();
    }
    w.finish().unwrap().into_inner()
}

pub fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

/// One loader result per malformed fixture, written under `dir`. Every entry should be an
/// error; the name says what is wrong with the file.
pub fn corruption_corpus(dir: &Path) -> Vec<(String, qdiff::Result<ImageBatch>)> {
    let good_i = write(dir, "good_i", &valid_images(2));
    let good_l = write(dir, "good_l", &valid_labels(&[0, 1]));

    let mut truncated = valid_images(2);
    truncated.truncate(16 + 100);
    let mut trailing = valid_images(2);
    trailing.push(0);

    let idx_cases: Vec<(&str, Vec<u8>, bool)> = vec![
        (
            "idx bad image magic",
            idx(0x802, &[2, 28, 28], &pixels(2)),
            true,
        ),
        ("idx header cut short", valid_images(2)[..10].to_vec(), true),
        ("idx empty file", Vec::new(), true),
        ("idx truncated payload", truncated, true),
        ("idx trailing bytes", trailing, true),
        (
            "idx 32×32 images",
            idx(0x803, &[1, 32, 32], &[0; 1024]),
            true,
        ),
        ("idx label count mismatch", valid_labels(&[0, 1, 2]), false),
        (
            "idx labels with rank-3 magic",
            idx(0x803, &[2, 1, 1], &[0, 1]),
            false,
        ),
        (
            "idx corrupt gzip",
            vec![0x1f, 0x8b, 8, 0, 1, 2, 3, 4, 5, 6],
            true,
        ),
    ];
    let mut out = Vec::new();
    for (k, (name, bytes, is_images)) in idx_cases.into_iter().enumerate() {
        let p = write(dir, &format!("case{k}"), &bytes);
        let r = if is_images {
            load_idx(&p, &good_l)
        } else {
            load_idx(&good_i, &p)
        };
        out.push((name.to_owned(), r));
    }
    out.push((
        "idx missing file".to_owned(),
        load_idx(dir.join("missing"), &good_l),
    ));

    let good_labels = npy("|u1", false, &[2], &[0, 1]);
    let good_images = npy("|u1", false, &[2, 28, 28], &pixels(2));
    let mut bad_version = good_images.clone();
    bad_version[6] = 3;
    let with_labels = |images: Vec<u8>| {
        npz(&[
            ("train_images.npy", images),
            ("train_labels.npy", good_labels.clone()),
        ])
    };
    let npz_cases: Vec<(&str, Vec<u8>)> = vec![
        ("npz not a zip", b"PK but not really".to_vec()),
        (
            "npz missing labels",
            npz(&[("train_images.npy", good_images.clone())]),
        ),
        ("npy bad magic", with_labels(b"NUMPY...".to_vec())),
        (
            "npy float dtype",
            with_labels(npy("<f8", false, &[2, 28, 28], &vec![0; 2 * 784 * 8])),
        ),
        (
            "npy fortran order",
            with_labels(npy("|u1", true, &[2, 28, 28], &pixels(2))),
        ),
        (
            "npy short payload",
            with_labels(npy("|u1", false, &[3, 28, 28], &pixels(2))),
        ),
        ("npy unsupported version", with_labels(bad_version)),
        (
            "npz 32×32 images",
            npz(&[
                (
                    "train_images.npy",
                    npy("|u1", false, &[1, 32, 32], &[0; 1024]),
                ),
                ("train_labels.npy", npy("|u1", false, &[1], &[0])),
            ]),
        ),
        (
            "npz label count mismatch",
            npz(&[
                ("train_images.npy", good_images.clone()),
                ("train_labels.npy", npy("|u1", false, &[3], &[0, 1, 2])),
            ]),
        ),
        (
            "npz two-dimensional labels",
            npz(&[
                ("train_images.npy", good_images.clone()),
                ("train_labels.npy", npy("|u1", false, &[1, 2], &[0, 1])),
            ]),
        ),
    ];
    for (k, (name, bytes)) in npz_cases.into_iter().enumerate() {
        let p = write(dir, &format!("case{k}.npz"), &bytes);
        out.push((name.to_owned(), load_npz(&p, Split::Train)));
    }
    out
}

/// Width, height, colour type and raw pixels of a PNG file.
pub fn decode_png(path: &Path) -> (u32, u32, png::ColorType, Vec<u8>) {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path).unwrap()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width, info.height, info.color_type, buf)
}
