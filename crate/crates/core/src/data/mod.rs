//! Video samples, the synthetic generator and on-disk formats.

mod io;
mod synth;

use davel_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    annotation_path, decode_features, encode_features, feature_paths, load_dataset, load_features, load_split,
    read_annotations, save_dataset, save_features, write_annotations, AnnotationRecord,
};
pub use synth::{generate_dataset, Prototypes};

/// One ground-truth event; times in snippets, `start` inclusive, `end`
/// exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
}

impl EventAnnotation {
    pub fn is_valid(&self, len: f64, num_classes: usize) -> bool {
        self.class_id < num_classes && 0.0 <= self.start && self.start < self.end && self.end <= len
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// Whether snippet `t` (covering `[t, t+1)`) lies inside the event, judged
    /// by its center.
    pub fn covers_snippet(&self, t: usize) -> bool {
        let center = t as f64 + 0.5;
        self.start <= center && center < self.end
    }
}

/// Synchronized audio and visual snippet features with annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub audio: Tensor<f32>,
    pub visual: Tensor<f32>,
    pub events: Vec<EventAnnotation>,
}

impl VideoSample {
    pub fn new(id: impl Into<String>, audio: Tensor<f32>, visual: Tensor<f32>, events: Vec<EventAnnotation>) -> Result<Self> {
        if audio.rows() != visual.rows() {
            return Err(Error::Contract(format!(
                "audio has {} snippets but visual has {}",
                audio.rows(),
                visual.rows()
            )));
        }
        Ok(Self {
            id: id.into(),
            audio,
            visual,
            events,
        })
    }

    /// Snippet count T.
    pub fn len(&self) -> usize {
        self.audio.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

impl DatasetSplit {
    pub fn get(&self, split: Split) -> &[VideoSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: Split) -> &mut Vec<VideoSample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

fn fit_rows(t: &Tensor<f32>, rows: usize) -> Tensor<f32> {
    let cols = t.cols();
    let mut data = vec![0.0; rows * cols];
    let keep = t.rows().min(rows);
    data[..keep * cols].copy_from_slice(&t.data()[..keep * cols]);
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

/// Zero-pads or truncates both streams to `max_len` snippets. The mask is true
/// exactly on original positions; events are clipped to the kept range and
/// dropped when nothing remains.
pub fn pad_or_crop(sample: &VideoSample, max_len: usize) -> (VideoSample, Vec<bool>) {
    let kept = sample.len().min(max_len);
    let mask = (0..max_len).map(|t| t < kept).collect();
    let limit = kept as f64;
    let events = sample
        .events
        .iter()
        .filter(|e| e.start < limit)
        .map(|e| EventAnnotation {
            end: e.end.min(limit),
            ..*e
        })
        .filter(|e| e.start < e.end)
        .collect();
    let padded = VideoSample {
        id: sample.id.clone(),
        audio: fit_rows(&sample.audio, max_len),
        visual: fit_rows(&sample.visual, max_len),
        events,
    };
    (padded, mask)
}
