//! Manifest CSV and PNG image input/output.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{
    AnnotationVector, Demographics, Image, ImageRecord, Split, AGE_BUCKETS, ATTRIBUTES, GENDERS,
    N_ATTRIBUTES, RACES,
};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.csv";
const IMAGE_DIR: &str = "images";

fn header() -> Vec<&'static str> {
    let mut h = vec!["id", "image_path", "protest", "violence"];
    h.extend(ATTRIBUTES);
    h.extend(["age_bucket", "gender", "race", "split"]);
    h
}

fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let side = image.side as u32;
        let mut enc = png::Encoder::new(&mut out, side, side);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let err = |e: png::EncodingError| Error::Invalid(format!("png encoding failed: {e}"));
        let mut w = enc.write_header().map_err(err)?;
        w.write_image_data(&image.to_bytes()).map_err(err)?;
    }
    Ok(out)
}

fn decode_png(path: &Path) -> Result<Image> {
    let bad = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| bad(e.to_string()))?;
    if info.width != info.height {
        return Err(bad(format!(
            "image is {}x{}, expected square",
            info.width, info.height
        )));
    }
    let px = (info.width * info.height) as usize;
    let bytes = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => bytes.to_vec(),
        png::ColorType::Rgba => bytes
            .chunks_exact(4)
            .flat_map(|c| [c[0], c[1], c[2]])
            .collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => bytes
            .chunks_exact(2)
            .flat_map(|c| [c[0], c[0], c[0]])
            .collect(),
        other => return Err(bad(format!("unsupported color type {other:?}"))),
    };
    if rgb.len() != px * 3 {
        return Err(bad("pixel buffer size mismatch".into()));
    }
    Ok(Image::from_bytes(info.width as usize, &rgb))
}

/// Writes images and the manifest under `out_dir`. The manifest is written
/// last and atomically, so a directory with a manifest is complete.
pub fn write_corpus(records: &[ImageRecord], out_dir: &Path) -> Result<()> {
    let img_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut ids = std::collections::HashSet::new();
    for r in records {
        if !ids.insert(r.id.as_str()) {
            return Err(Error::Invalid(format!("duplicate record id {}", r.id)));
        }
        r.annotation.validate()?;
        let path = img_dir.join(format!("{}.png", r.id));
        write_atomic(&path, &encode_png(&r.image)?)?;
    }
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let ser = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(header()).map_err(ser)?;
    for r in records {
        let a = &r.annotation;
        let mut row = vec![
            r.id.clone(),
            format!("{IMAGE_DIR}/{}.png", r.id),
            u8::from(a.protest).to_string(),
            a.violence.to_string(),
        ];
        row.extend(a.attributes.iter().map(|&b| u8::from(b).to_string()));
        match a.demographics {
            Some(d) => row.extend([
                AGE_BUCKETS[d.age_bucket as usize].to_string(),
                GENDERS[d.gender as usize].to_string(),
                RACES[d.race as usize].to_string(),
            ]),
            None => row.extend([String::new(), String::new(), String::new()]),
        }
        row.push(r.split.as_str().to_string());
        w.write_record(&row).map_err(ser)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(&out_dir.join(MANIFEST_FILE), &bytes)
}

fn parse_bit(s: &str, col: &str) -> std::result::Result<bool, String> {
    match s.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(format!("column {col}: expected 0 or 1, got `{other}`")),
    }
}

fn lookup(s: &str, options: &[&str], col: &str) -> std::result::Result<u8, String> {
    options
        .iter()
        .position(|o| *o == s.trim())
        .map(|i| i as u8)
        .ok_or_else(|| format!("column {col}: unknown category `{s}`"))
}

struct Row {
    id: String,
    path: String,
    annotation: AnnotationVector,
    split: Split,
}

fn parse_row(rec: &csv::StringRecord) -> std::result::Result<Row, String> {
    let n = header().len();
    if rec.len() != n {
        return Err(format!("expected {n} fields, got {}", rec.len()));
    }
    let protest = parse_bit(&rec[2], "protest")?;
    let violence: f64 = rec[3]
        .trim()
        .parse()
        .map_err(|_| format!("column violence: not a number: `{}`", &rec[3]))?;
    let mut attributes = [false; N_ATTRIBUTES];
    for (j, a) in attributes.iter_mut().enumerate() {
        *a = parse_bit(&rec[4 + j], ATTRIBUTES[j])?;
    }
    let (age, gender, race) = (&rec[14], &rec[15], &rec[16]);
    let demographics = match (age.is_empty(), gender.is_empty(), race.is_empty()) {
        (true, true, true) => None,
        (false, false, false) => Some(Demographics {
            age_bucket: lookup(age, &AGE_BUCKETS, "age_bucket")?,
            gender: lookup(gender, &GENDERS, "gender")?,
            race: lookup(race, &RACES, "race")?,
        }),
        _ => return Err("demographic columns must be all present or all empty".into()),
    };
    let annotation = AnnotationVector {
        protest,
        violence,
        attributes,
        demographics,
    };
    annotation.validate().map_err(|e| e.to_string())?;
    let split = Split::parse(rec[17].trim())
        .ok_or_else(|| format!("column split: expected train or test, got `{}`", &rec[17]))?;
    Ok(Row {
        id: rec[0].to_string(),
        path: rec[1].to_string(),
        annotation,
        split,
    })
}

/// Loads records in manifest order. Row numbers in errors count the header as row 1.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<ImageRecord>> {
    let file = File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let err = |row: usize, message: String| Error::Manifest {
        file: manifest_path.to_path_buf(),
        row,
        message,
    };
    let hdr = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if hdr.iter().collect::<Vec<_>>() != header() {
        return Err(err(
            1,
            format!("unexpected header; expected {}", header().join(",")),
        ));
    }
    let mut out = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| err(row, e.to_string()))?;
        let r = parse_row(&rec).map_err(|m| err(row, m))?;
        if !ids.insert(r.id.clone()) {
            return Err(err(row, format!("duplicate id {}", r.id)));
        }
        let path: PathBuf = base.join(&r.path);
        let image = decode_png(&path)?;
        out.push(ImageRecord {
            id: r.id,
            image,
            annotation: r.annotation,
            split: r.split,
        });
    }
    Ok(out)
}

/// SHA-256 of the manifest file bytes.
pub fn manifest_digest(manifest_path: &Path) -> Result<String> {
    let bytes = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Content digest of in-memory records: ids, splits, annotations and pixels.
pub fn records_digest<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.id.as_bytes());
        h.update([0, r.split as u8]);
        let a = &r.annotation;
        h.update([u8::from(a.protest)]);
        h.update(a.violence.to_le_bytes());
        h.update(a.attributes.map(u8::from));
        match a.demographics {
            Some(d) => h.update([1, d.age_bucket, d.gender, d.race]),
            None => h.update([0]),
        }
        h.update(r.image.to_bytes());
    }
    hex::encode(h.finalize())
}
