//! Regenerates the bundled toy dataset under `fixtures/toy`:
//! five small PDFs (one figure page and one knowledge page per anomaly),
//! twenty test images and the dataset, annotation and run config files.
//!
//!     cargo run -p pbf-rag-core --example make_toy_fixtures -- fixtures/toy

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use lopdf::content::{Content, Operation};
use lopdf::{dictionary, Document, Object, Stream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

struct Anomaly {
    name: &'static str,
    doc_id: &'static str,
    caption: &'static str,
    knowledge: &'static str,
    filler: &'static str,
}

const ANOMALIES: [Anomaly; 5] = [
    Anomaly {
        name: "Recoater Hopping",
        doc_id: "hopping_review",
        caption: "Figure 2. Layer images related to recoater hopping. Recoater hopping shows as evenly spaced bands perpendicular to the recoat direction; the images were taken strictly after spreading by the layerwise camera.",
        knowledge: "Comprehensive information about recoater hopping. Recoater hopping happens when the blade bounces or chatters as it crosses part regions that stand proud of the bed. Typical causes are a stiff blade, distorted geometry, excessive recoat speed and thermal warping. Each impact leaves a band of thin powder, so the pattern repeats at a fixed pitch across the plate. Compliant blades, lower recoat speed and support structures that limit curl reduce hopping.",
        filler: "This review summarises layerwise monitoring of laser powder bed fusion. A camera above the plate records every layer twice, once after the laser exposure and once after fresh powder is spread. Lighting from several angles reveals height changes of the surface. The measurements were collected on an industrial machine with a nitrogen atmosphere.",
    },
    Anomaly {
        name: "Recoater Streaking",
        doc_id: "streaking_study",
        caption: "Figure 4. Layer images related to recoater streaking. Recoater streaking appears as long straight lines parallel to the recoat direction, shown strictly for layers where the blade carried debris.",
        knowledge: "Comprehensive information about recoater streaking. Recoater streaking is a linear groove dragged through the powder by a damaged or contaminated blade. Common causes are nicks in the blade edge, a trapped particle or spatter welded to the blade. The streak runs the full length of the bed in the travel direction and persists across consecutive layers. Inspecting and replacing worn blades and sieving the powder prevents streaking.",
        filler: "The study evaluated blade materials for powder spreading. Rubber, brush and steel blades were tested with a nickel superalloy powder of fifteen to forty five microns. Layer thickness was forty microns and every build contained test coupons and lattice samples. Process logs recorded gas flow, oxygen level and laser power throughout.",
    },
    Anomaly {
        name: "Incomplete Spreading",
        doc_id: "spreading_notes",
        caption: "Figure 1. Layer images related to incomplete spreading. Incomplete spreading leaves a bare region near the far edge of the plate where the dose ran out, recorded strictly after recoating.",
        knowledge: "Comprehensive information about incomplete spreading. Incomplete spreading means the recoater did not deposit a full layer over the build area. It is caused by an insufficient powder dose, poor flowability from moisture, or a short feed stroke. Visually the bed shows darker exposed metal or partial coverage, usually at the end of the recoat stroke. Raising the dose factor, drying the powder and checking the feed piston avoid incomplete layers.",
        filler: "These notes describe powder handling before a build. Powder is sieved, dried and loaded into the dispenser, then the plate is levelled and heated. Flowability is checked with a Hall funnel test and the apparent density is measured. Operators record lot numbers so that reuse cycles can be traced.",
    },
    Anomaly {
        name: "Super-Elevation",
        doc_id: "elevation_report",
        caption: "Figure 5. Layer images related to super-elevation. Super-elevation appears as bright part edges standing above the fresh powder, imaged strictly after spreading.",
        knowledge: "Comprehensive information about super-elevation. Super-elevation is the rise of solidified material above the powder plane. It is caused by residual stress curling thin or overhanging features, high energy input and swelling at edges. The raised region appears bright and uncovered after recoating and often grows from layer to layer. Adjusting scan strategy, reducing energy density and adding supports keep parts below the recoat plane.",
        filler: "The report covers thermal history in tall builds. Heat accumulates in slender sections and the cooling rate changes with height. Thermocouples under the plate and a pyrometer above it logged temperatures. Parts were sectioned afterwards to measure porosity and grain structure.",
    },
    Anomaly {
        name: "Soot",
        doc_id: "soot_overview",
        caption: "Figure 3. Layer images related to soot. Soot appears as dark diffuse deposits downstream of the gas flow, photographed strictly after melting.",
        knowledge: "Comprehensive information about soot. Soot is condensate from the vapour plume that settles on the powder bed. It is caused by weak or uneven shielding gas flow, high laser power and large exposure areas. It shows as dark smudges or a grey haze near the gas outlet side of the plate. Maintaining gas velocity, cleaning the flow nozzles and changing filters reduce soot deposition.",
        filler: "This overview explains the shielding gas system of the machine. Argon or nitrogen flows across the plate from an inlet nozzle to an outlet with a filter. The flow carries process byproducts away from the laser path. Pressure drop across the filter is logged so that replacement can be scheduled.",
    },
];

/// (sample id, annotated anomalies).
const SAMPLES: [(&str, &[&str]); 10] = [
    ("layer_001", &["Recoater Hopping"]),
    ("layer_002", &["Recoater Streaking", "Soot"]),
    ("layer_003", &[]),
    ("layer_004", &["Super-Elevation"]),
    ("layer_005", &["Incomplete Spreading", "Recoater Hopping"]),
    ("layer_006", &["Soot"]),
    ("layer_007", &[]),
    ("layer_008", &["Recoater Streaking"]),
    ("layer_009", &["Super-Elevation", "Incomplete Spreading", "Soot"]),
    ("layer_010", &["Recoater Hopping", "Super-Elevation"]),
];

fn wrap(text: &str, width: usize) -> Vec<String> {
    let mut lines = Vec::new();
    let mut cur = String::new();
    for w in text.split_whitespace() {
        if !cur.is_empty() && cur.len() + 1 + w.len() > width {
            lines.push(std::mem::take(&mut cur));
        }
        if !cur.is_empty() {
            cur.push(' ');
        }
        cur.push_str(w);
    }
    if !cur.is_empty() {
        lines.push(cur);
    }
    lines
}

fn text_ops(text: &str, top: f32) -> Vec<Operation> {
    let mut ops = vec![
        Operation::new("BT", vec![]),
        Operation::new("Tf", vec!["F1".into(), 11.into()]),
        Operation::new("TL", vec![14.into()]),
        Operation::new("Td", vec![56.into(), top.into()]),
    ];
    for line in wrap(text, 90) {
        ops.push(Operation::new("Tj", vec![Object::string_literal(line)]));
        ops.push(Operation::new("T*", vec![]));
    }
    ops.push(Operation::new("ET", vec![]));
    ops
}

/// Grey bars standing in for a layer photograph on the figure page.
fn figure_ops(seed: usize) -> Vec<Operation> {
    let mut ops = vec![
        Operation::new("rg", vec![0.85.into(), 0.85.into(), 0.85.into()]),
        Operation::new("re", vec![120.into(), 380.into(), 372.into(), 300.into()]),
        Operation::new("f", vec![]),
        Operation::new("rg", vec![0.35.into(), 0.35.into(), 0.35.into()]),
    ];
    for i in 0..6 {
        let (x, y, w, h) = match seed % 3 {
            0 => (130 + 58 * i, 390, 8, 280),
            1 => (130, 395 + 48 * i, 352, 6),
            _ => (140 + 55 * i, 420 + 30 * (i % 3), 20, 20),
        };
        ops.push(Operation::new("re", vec![x.into(), y.into(), w.into(), h.into()]));
        ops.push(Operation::new("f", vec![]));
    }
    ops.push(Operation::new("rg", vec![0.into(), 0.into(), 0.into()]));
    ops
}

fn write_pdf(path: &Path, a: &Anomaly, idx: usize) {
    let mut doc = Document::with_version("1.5");
    let pages_id = doc.new_object_id();
    let font_id = doc.add_object(dictionary! {
        "Type" => "Font",
        "Subtype" => "Type1",
        "BaseFont" => "Helvetica",
        "Encoding" => "WinAnsiEncoding",
    });
    let resources_id = doc.add_object(dictionary! {
        "Font" => dictionary! { "F1" => font_id },
    });
    let bodies = [
        text_ops(a.filler, 720.0),
        {
            let mut ops = figure_ops(idx);
            ops.extend(text_ops(a.caption, 350.0));
            ops
        },
        text_ops(a.knowledge, 720.0),
    ];
    let mut kids = Vec::new();
    for ops in bodies {
        let content = Content { operations: ops };
        let content_id = doc.add_object(Stream::new(dictionary! {}, content.encode().expect("content encodes")));
        let page_id = doc.add_object(dictionary! {
            "Type" => "Page",
            "Parent" => pages_id,
            "Contents" => content_id,
            "Resources" => resources_id,
            "MediaBox" => vec![0.into(), 0.into(), 612.into(), 792.into()],
        });
        kids.push(Object::from(page_id));
    }
    let count = kids.len() as i64;
    doc.objects.insert(
        pages_id,
        Object::Dictionary(dictionary! { "Type" => "Pages", "Kids" => kids, "Count" => count }),
    );
    let catalog_id = doc.add_object(dictionary! { "Type" => "Catalog", "Pages" => pages_id });
    doc.trailer.set("Root", catalog_id);
    doc.save(path).expect("pdf writes");
}

/// Seeded speckle plus a faint mark per annotated anomaly.
fn write_layer_image(path: &Path, seed: u64, marks: &[usize]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::from_fn(96, 96, |_, _| {
        let v = 110 + rng.random_range(0..40u8);
        Rgb([v, v, v])
    });
    for &m in marks {
        for i in 0..96 {
            let (x, y) = match m {
                0 => (i, 10 + 16 * (i % 5)),
                1 => (20 + 12 * m as u32, i),
                _ => (i, (i * (m as u32 + 1)) % 96),
            };
            img.put_pixel(x.min(95), y.min(95), Rgb([200, 200, 200]));
        }
    }
    img.save(path).expect("png writes");
}

fn write_json(path: PathBuf, v: &serde_json::Value) {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    std::fs::write(path, s).expect("json writes");
}

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures/toy".into()));
    std::fs::create_dir_all(out.join("docs")).unwrap();
    std::fs::create_dir_all(out.join("images")).unwrap();

    let mut manifest = Vec::new();
    for (i, a) in ANOMALIES.iter().enumerate() {
        let rel = format!("docs/{}.pdf", a.doc_id);
        write_pdf(&out.join(&rel), a, i);
        manifest.push(json!({"doc_id": a.doc_id, "path": rel}));
    }
    write_json(out.join("corpus.json"), &json!(manifest));

    let names: Vec<&str> = ANOMALIES.iter().map(|a| a.name).collect();
    write_json(out.join("dataset.json"), &json!({"dataset_id": "toy", "anomalies": names}));

    let mut annotations = Vec::new();
    for (n, (id, present)) in SAMPLES.iter().enumerate() {
        let marks: Vec<usize> = present
            .iter()
            .map(|p| names.iter().position(|x| x == p).expect("known anomaly"))
            .collect();
        let melt = format!("images/{id}_post_melting.png");
        let spread = format!("images/{id}_post_spreading.png");
        write_layer_image(&out.join(&melt), 2 * n as u64, &marks);
        write_layer_image(&out.join(&spread), 2 * n as u64 + 1, &marks);
        annotations.push(json!({
            "sample_id": id,
            "images": {"post_melting": melt, "post_spreading": spread},
            "anomalies": present,
        }));
    }
    write_json(out.join("annotations.json"), &json!(annotations));

    write_json(
        out.join("config.json"),
        &json!({
            "corpus_manifest": "corpus.json",
            "dataset": "dataset.json",
            "annotations": "annotations.json",
            "output_dir": "out",
            "seed": 7,
            "chunk_size": 400,
            "chunk_overlap": 80,
            "mock": {"oracle": "ground_truth", "embedding_dim": 1024}
        }),
    );
    println!("wrote {}", out.display());
}
