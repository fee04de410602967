//! Prompt templates, skeleton token slots and training exchanges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{answer_for, LabelLexicon, OutputFormat, PromptKind};
use crate::numerics::Tensor;
use crate::tokenizer::TokenBundle;
use crate::unify::unify_tokens;

pub const RECOGNITION_PROMPT: &str =
    "#Human: <Skeleton> <SkeletonFeature> </Skeleton> Can you tell me the emotion of this person? #Assistant:";

/// Renders the instruction for `kind`. Description prompts embed `label`
/// verbatim in brackets and require it to name a lexicon label.
pub fn assemble_prompt(
    kind: PromptKind,
    label: Option<&str>,
    lexicon: &LabelLexicon,
) -> Result<String> {
    match (kind, label) {
        (PromptKind::Recognition, None) => Ok(RECOGNITION_PROMPT.to_string()),
        (PromptKind::Recognition, Some(_)) => {
            Err(Error::param("recognition prompts carry no label"))
        }
        (PromptKind::Description, None) => Err(Error::param("description prompts need a label")),
        (PromptKind::Description, Some(l)) => {
            if l.contains(char::is_whitespace) || lexicon.canonical(l).is_none() {
                return Err(Error::param(format!("{l:?} is not a lexicon label")));
            }
            Ok(format!(
                "#Human: <Skeleton> <SkeletonFeature> </Skeleton> The emotion of this person is [{l}], please tell me some reasons for it. #Assistant:"
            ))
        }
    }
}

/// Which skeleton tokens occupy the decoder context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One slot holding the semantic token.
    #[default]
    Semantic,
    /// One slot per joint (padded to the largest skeleton) followed by one per frame.
    Spatiotemporal,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(Granularity::Semantic),
            "spatiotemporal" => Ok(Granularity::Spatiotemporal),
            other => Err(Error::param(format!("unknown granularity {other:?}"))),
        }
    }
}

/// Raw skeleton tokens arranged as decoder slots: `values` is `(slots, width)`
/// and `valid` marks slots that carry data rather than padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSlots {
    pub granularity: Granularity,
    pub values: Tensor,
    pub valid: Vec<bool>,
    /// Number of leading joint slots; the rest are frame slots.
    pub spatial_slots: usize,
}

impl SkeletonSlots {
    /// `max_joints` fixes the unified spatial length `max_joints · C`.
    pub fn from_bundle(
        bundle: &TokenBundle,
        granularity: Granularity,
        max_joints: usize,
    ) -> Result<Self> {
        let (frames, _, channels) = bundle.source_dims;
        match granularity {
            Granularity::Semantic => Ok(Self {
                granularity,
                values: Tensor::matrix(1, bundle.semantic.len(), bundle.semantic.clone())?,
                valid: vec![true],
                spatial_slots: 0,
            }),
            Granularity::Spatiotemporal => {
                let unified = unify_tokens(&bundle.spatial, max_joints * channels)?;
                if bundle.temporal.len() != frames * channels {
                    return Err(Error::param("temporal token length does not match T·C"));
                }
                let mut data = unified.values;
                data.extend_from_slice(&bundle.temporal);
                let mut valid: Vec<bool> =
                    unified.mask.chunks(channels).map(|m| m[0] == 1.0).collect();
                valid.extend(std::iter::repeat_n(true, frames));
                Ok(Self {
                    granularity,
                    values: Tensor::matrix(max_joints + frames, channels, data)?,
                    valid,
                    spatial_slots: max_joints,
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    /// Rows of the slots that carry data.
    pub fn valid_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .filter(|&i| self.valid[i])
            .map(|i| self.values.row(i).to_vec())
            .collect()
    }
}

/// One prompt/completion pair with its skeleton tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptExchange {
    pub sample_id: String,
    pub kind: PromptKind,
    /// Canonical label of the sample.
    pub label: String,
    pub prompt: String,
    pub completion: String,
    pub slots: SkeletonSlots,
}

/// The recognition exchange for a sample whose canonical label is `canonical`.
pub fn recognition_exchange(
    sample_id: &str,
    canonical: &str,
    slots: SkeletonSlots,
    format: OutputFormat,
    lexicon: &LabelLexicon,
) -> Result<PromptExchange> {
    Ok(PromptExchange {
        sample_id: sample_id.to_string(),
        kind: PromptKind::Recognition,
        label: canonical.to_string(),
        prompt: assemble_prompt(PromptKind::Recognition, None, lexicon)?,
        completion: answer_for(format, canonical, lexicon)?,
        slots,
    })
}

/// The description exchange; the prompt names the label by its lowercase
/// canonical form.
pub fn description_exchange(
    sample_id: &str,
    canonical: &str,
    description: &str,
    slots: SkeletonSlots,
    lexicon: &LabelLexicon,
) -> Result<PromptExchange> {
    if description.trim().is_empty() {
        return Err(Error::param(format!(
            "sample {sample_id} has an empty description"
        )));
    }
    let word = canonical.to_lowercase();
    Ok(PromptExchange {
        sample_id: sample_id.to_string(),
        kind: PromptKind::Description,
        label: canonical.to_string(),
        prompt: assemble_prompt(PromptKind::Description, Some(&word), lexicon)?,
        completion: description.to_string(),
        slots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_templates() {
        let l = LabelLexicon::default();
        assert_eq!(
            assemble_prompt(PromptKind::Recognition, None, &l).unwrap(),
            "#Human: <Skeleton> <SkeletonFeature> </Skeleton> Can you tell me the emotion of this person? #Assistant:"
        );
        assert_eq!(
            assemble_prompt(PromptKind::Description, Some("shame"), &l).unwrap(),
            "#Human: <Skeleton> <SkeletonFeature> </Skeleton> The emotion of this person is [shame], please tell me some reasons for it. #Assistant:"
        );
        assert!(assemble_prompt(PromptKind::Description, Some("boredom"), &l).is_err());
        assert!(assemble_prompt(PromptKind::Description, None, &l).is_err());
        assert!(assemble_prompt(PromptKind::Recognition, Some("shame"), &l).is_err());
    }

    #[test]
    fn recognition_prompt_has_no_label_and_description_has_one() {
        let l = LabelLexicon::default();
        let r = assemble_prompt(PromptKind::Recognition, None, &l).unwrap();
        assert!(r
            .split(|c: char| !c.is_alphanumeric())
            .all(|w| l.canonical(w).is_none()));
        let d = assemble_prompt(PromptKind::Description, Some("happy"), &l).unwrap();
        assert_eq!(d.matches('[').count(), 1);
        assert_eq!(d.matches(']').count(), 1);
    }

    fn bundle(j: usize) -> TokenBundle {
        let (t, c) = (3, 2);
        TokenBundle {
            semantic: vec![0.5; 4],
            spatial: (0..j * c).map(|i| i as f64 + 1.0).collect(),
            temporal: vec![-1.0; t * c],
            source_dims: (t, j, c),
        }
    }

    #[test]
    fn slot_layouts() {
        let s = SkeletonSlots::from_bundle(&bundle(2), Granularity::Semantic, 4).unwrap();
        assert_eq!((s.len(), s.width()), (1, 4));
        let st = SkeletonSlots::from_bundle(&bundle(2), Granularity::Spatiotemporal, 4).unwrap();
        assert_eq!((st.len(), st.width(), st.spatial_slots), (7, 2, 4));
        assert_eq!(st.valid, [true, true, false, false, true, true, true]);
        assert_eq!(st.values.row(1), [3.0, 4.0]);
        assert_eq!(st.values.row(2), [0.0, 0.0]);
        assert_eq!(st.valid_rows().len(), 5);
        assert!(SkeletonSlots::from_bundle(&bundle(5), Granularity::Spatiotemporal, 4).is_err());
    }
}
