//! Long-sequence scheduling: clip partitions with staggered offsets,
//! pre-inference frame sampling and anchor maps.

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Half-open frame range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClipSpan {
    pub start: usize,
    pub end: usize,
}

impl ClipSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }

    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl Serialize for ClipSpan {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.start, self.end].serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalPlan {
    pub n_frames: usize,
    pub clip_len: usize,
    /// One partition per inference timestep, in denoising order.
    pub per_timestep: Vec<Vec<ClipSpan>>,
    pub preinference_indices: Vec<usize>,
    /// `anchor_map[i][j]` lists the anchors inside `per_timestep[i][j]`.
    pub anchor_map: Vec<Vec<Vec<usize>>>,
}

impl Serialize for TemporalPlan {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("TemporalPlan", 6)?;
        st.serialize_field("n_frames", &self.n_frames)?;
        st.serialize_field("clip_len", &self.clip_len)?;
        st.serialize_field("steps", &self.per_timestep.len())?;
        st.serialize_field("per_timestep", &self.per_timestep)?;
        st.serialize_field("preinference", &self.preinference_indices)?;
        st.serialize_field("anchors", &self.anchor_map)?;
        st.end()
    }
}

impl TemporalPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Clip offset used at denoising position `i`.
    pub fn offset_at(clip_len: usize, i: usize) -> usize {
        if i % 2 == 0 {
            0
        } else {
            clip_len / 2
        }
    }
}

/// Splits `[0, n_frames)` into a leading `[0, offset)` span (when `offset > 0`),
/// then consecutive `clip_len`-wide spans, then the remainder.
pub fn partition_clips(n_frames: usize, clip_len: usize, offset: usize) -> Result<Vec<ClipSpan>> {
    if clip_len == 0 {
        return Err(Error::invalid("clip_len must be >= 1"));
    }
    if offset >= clip_len {
        return Err(Error::invalid(format!(
            "offset {offset} must be < clip_len {clip_len}"
        )));
    }
    let mut spans = Vec::new();
    let mut start = 0;
    if offset > 0 && n_frames > 0 {
        let end = offset.min(n_frames);
        spans.push(ClipSpan { start: 0, end });
        start = end;
    }
    while start < n_frames {
        let end = (start + clip_len).min(n_frames);
        spans.push(ClipSpan { start, end });
        start = end;
    }
    Ok(spans)
}

/// Even denoising positions partition from frame 0, odd positions from the half-clip offset.
pub fn staggered_plan(n_frames: usize, clip_len: usize, n_inference_steps: usize) -> Result<TemporalPlan> {
    if n_frames == 0 {
        return Err(Error::invalid("n_frames must be >= 1"));
    }
    if n_inference_steps == 0 {
        return Err(Error::invalid("n_inference_steps must be >= 1"));
    }
    let per_timestep = (0..n_inference_steps)
        .map(|i| partition_clips(n_frames, clip_len, TemporalPlan::offset_at(clip_len, i)))
        .collect::<Result<Vec<_>>>()?;
    let anchor_map = per_timestep.iter().map(|p| vec![Vec::new(); p.len()]).collect();
    Ok(TemporalPlan {
        n_frames,
        clip_len,
        per_timestep,
        preinference_indices: Vec::new(),
        anchor_map,
    })
}

/// Every `ceil(n / clip_len)`-th frame starting at 0, so the sample fits one clip.
pub fn sample_preinference_frames(n_frames: usize, clip_len: usize) -> Result<Vec<usize>> {
    if n_frames == 0 || clip_len == 0 {
        return Err(Error::invalid("n_frames and clip_len must be >= 1"));
    }
    let stride = n_frames.div_ceil(clip_len);
    Ok((0..n_frames).step_by(stride).collect())
}

/// Fills `anchor_map` from `preinference_indices`.
pub fn anchor_plan(mut plan: TemporalPlan) -> TemporalPlan {
    plan.anchor_map = plan
        .per_timestep
        .iter()
        .map(|spans| {
            spans
                .iter()
                .map(|span| {
                    plan.preinference_indices
                        .iter()
                        .copied()
                        .filter(|&i| span.contains(i))
                        .collect()
                })
                .collect()
        })
        .collect();
    plan
}

/// Staggered plan with pre-inference anchors, or without when `guidance` is off.
pub fn build_plan(n_frames: usize, clip_len: usize, steps: usize, guidance: bool) -> Result<TemporalPlan> {
    let mut plan = staggered_plan(n_frames, clip_len, steps)?;
    if guidance {
        plan.preinference_indices = sample_preinference_frames(n_frames, clip_len)?;
    }
    Ok(anchor_plan(plan))
}
