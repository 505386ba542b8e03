//! The detection pipeline: camera access, frame scaling, one stage per
//! network layer-stage, box drawing and image output.

use std::path::PathBuf;

use super::{PipelineState, Stage};
use crate::detect::{clip_box, decode_detections, draw_boxes, DecodeOptions, Detection};
use crate::error::{Error, Result};
use crate::image::{letterbox, read_ppm, write_ppm, Image, Letterbox};
use crate::runtime::Network;
use crate::tensor::FeatureMap;

/// A frame on its way through the pipeline.
#[derive(Debug, Clone, Default)]
pub struct Frame {
    pub name: String,
    /// Where camera access reads the image from when `image` is unset.
    pub input: Option<PathBuf>,
    pub image: Option<Image>,
    pub letterbox: Option<Letterbox>,
    pub data: Option<FeatureMap>,
    pub detections: Vec<Detection>,
    pub annotated: Option<Image>,
    /// Where image output wrote the annotated frame.
    pub output: Option<PathBuf>,
}

impl Frame {
    pub fn from_path(path: PathBuf) -> Self {
        Self {
            name: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            input: Some(path),
            ..Default::default()
        }
    }

    pub fn from_image(name: impl Into<String>, image: Image) -> Self {
        Self {
            name: name.into(),
            image: Some(image),
            ..Default::default()
        }
    }
}

pub type FrameSource = Box<dyn FnMut(u64) -> Result<Option<Frame>> + Send>;
pub type FrameSink = Box<dyn FnMut(u64, Frame) -> Result<()> + Send>;

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    pub decode: DecodeOptions,
    /// Directory for annotated frames; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

fn missing(what: &str) -> Error {
    Error::Contract(format!("frame reached a stage without its {what}"))
}

/// Wraps `net` into a pipeline with four stages more than the network has
/// layer-stages.
pub fn build_pipeline(
    net: Network,
    source: FrameSource,
    sink: FrameSink,
    opts: PipelineOptions,
) -> PipelineState<Frame> {
    let (_, net_h, net_w) = net.input_dims();
    let region = net.config.region().cloned();
    let mut stages = vec![
        Stage::new("camera access", |mut f: Frame| {
            if f.image.is_none() {
                let path = f.input.as_ref().ok_or_else(|| missing("image"))?;
                f.image = Some(read_ppm(path)?);
            }
            Ok(f)
        }),
        Stage::new("frame scaling", move |mut f: Frame| {
            let img = f.image.as_ref().ok_or_else(|| missing("image"))?;
            let (fm, lb) = letterbox(img, net_w, net_h);
            f.data = Some(fm);
            f.letterbox = Some(lb);
            Ok(f)
        }),
    ];
    for mut ns in net.into_stages() {
        stages.push(Stage::new(ns.label.clone(), move |mut f: Frame| {
            let x = f.data.take().ok_or_else(|| missing("feature map"))?;
            f.data = Some(ns.forward(&x)?);
            Ok(f)
        }));
    }
    let decode = opts.decode;
    stages.push(Stage::new("box drawing", move |mut f: Frame| {
        let img = f.image.as_ref().ok_or_else(|| missing("image"))?;
        if let (Some(region), Some(fm)) = (&region, &f.data) {
            let lb = f.letterbox.ok_or_else(|| missing("letterbox"))?;
            f.detections = decode_detections(fm, region, &decode)?
                .into_iter()
                .map(|mut d| {
                    let b = lb.unscale_box(d.bbox);
                    d.bbox = clip_box(b);
                    d
                })
                .filter(|d| d.bbox[2] > 0.0 && d.bbox[3] > 0.0)
                .collect();
        }
        f.annotated = Some(draw_boxes(img, &f.detections));
        Ok(f)
    }));
    let out_dir = opts.out_dir;
    stages.push(Stage::new("image output", move |mut f: Frame| {
        if let Some(dir) = &out_dir {
            let img = f.annotated.as_ref().ok_or_else(|| missing("annotated image"))?;
            let path = dir.join(&f.name);
            write_ppm(&path, img)?;
            f.output = Some(path);
        }
        Ok(f)
    }));
    PipelineState::new(stages, source, sink)
}
