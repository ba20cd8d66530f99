//! Synchronous session state: the click stack, undo history and cached
//! per-image model context.

use std::sync::Arc;

use clickprobe::clicks::{iou, next_click_eval, BinaryMask, Click, ClickState};
use clickprobe::model::{Context, ProbeModel};
use clickprobe::tensor::Tensor;
use clickprobe::upsample::FeatureMap;
use clickprobe::{Error, Result};
use serde::Serialize;

pub const PROB_THRESHOLD: f64 = 0.5;

pub struct Session {
    image: Tensor<f32>,
    gt: Option<BinaryMask>,
    model: Arc<ProbeModel<f32>>,
    ingested: Option<FeatureMap<f32>>,
    ctx: Context<f32>,
    clickless: Vec<f32>,
    state: ClickState,
    probs: Vec<f32>,
    history: Vec<(ClickState, Vec<f32>)>,
}

/// What clients see after every mutation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct View {
    pub mask_rle: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    pub click_count: usize,
    pub clicks: Vec<Click>,
    pub height: usize,
    pub width: usize,
}

impl Session {
    /// Prepares the model context and runs the clickless forward.
    pub fn new(
        model: Arc<ProbeModel<f32>>,
        image: Tensor<f32>,
        gt: Option<BinaryMask>,
        ingested: Option<FeatureMap<f32>>,
    ) -> Result<Self> {
        let (_, h, w) = image.dims3()?;
        if let Some(g) = &gt {
            if g.dims() != (h, w) {
                return Err(Error::Shape(format!("ground truth is {:?}, image is {h}x{w}", g.dims())));
            }
        }
        let ctx = model.prepare(&image, ingested.as_ref())?;
        let state = ClickState::new(h, w);
        let clickless = model.predict(&ctx, &state)?;
        Ok(Session { image, gt, model, ingested, ctx, probs: clickless.clone(), clickless, state, history: Vec::new() })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.state.dims()
    }

    pub fn image(&self) -> &Tensor<f32> {
        &self.image
    }

    pub fn model(&self) -> &ProbeModel<f32> {
        &self.model
    }

    pub fn ingested(&self) -> Option<&FeatureMap<f32>> {
        self.ingested.as_ref()
    }

    pub fn has_gt(&self) -> bool {
        self.gt.is_some()
    }

    pub fn clicks(&self) -> &[Click] {
        self.state.clicks()
    }

    pub fn history_depth(&self) -> usize {
        self.history.len()
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn mask(&self) -> BinaryMask {
        let (h, w) = self.dims();
        BinaryMask::from_probs(h, w, &self.probs, PROB_THRESHOLD).expect("probabilities match the image")
    }

    pub fn in_bounds(&self, row: i64, col: i64) -> bool {
        let (h, w) = self.dims();
        (0..h as i64).contains(&row) && (0..w as i64).contains(&col)
    }

    pub fn click(&mut self, click: Click) -> Result<()> {
        let mut next = self.state.clone();
        next.push(click)?;
        let probs = self.model.predict(&self.ctx, &next)?;
        next.set_prev_prob(&probs)?;
        let prev = std::mem::replace(&mut self.state, next);
        self.history.push((prev, std::mem::replace(&mut self.probs, probs)));
        Ok(())
    }

    /// `false` when there is nothing to undo.
    pub fn undo(&mut self) -> bool {
        match self.history.pop() {
            Some((state, probs)) => {
                self.state = state;
                self.probs = probs;
                true
            }
            None => false,
        }
    }

    pub fn reset(&mut self) {
        let (h, w) = self.dims();
        self.state = ClickState::new(h, w);
        self.probs = self.clickless.clone();
        self.history.clear();
    }

    /// The protocol's next click against the ground truth. `Ok(None)` when
    /// there is no ground truth.
    pub fn suggest(&self) -> Result<Option<Click>> {
        match &self.gt {
            Some(gt) => next_click_eval(&self.mask(), gt, &self.state).map(Some),
            None => Ok(None),
        }
    }

    pub fn view(&self) -> View {
        let mask = self.mask();
        let (h, w) = self.dims();
        View {
            mask_rle: crate::rle::encode(&mask),
            iou: self.gt.as_ref().map(|g| iou(&mask, g).expect("same dims")),
            click_count: self.state.len(),
            clicks: self.state.clicks().to_vec(),
            height: h,
            width: w,
        }
    }
}
