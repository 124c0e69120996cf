//! Bidirectional retrieval metrics: R@K, median rank and SumR.

use serde::Serialize;

use crate::error::{Error, Result};

/// Ties rank the positive best among equals; reports carry this note.
pub const TIE_RULE: &str = "optimistic";

/// Dense video x caption score matrix (row-major).
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub videos: usize,
    pub captions: usize,
    values: Vec<f32>,
}

impl ScoreMatrix {
    pub fn zeros(videos: usize, captions: usize) -> Self {
        ScoreMatrix { videos, captions, values: vec![0.0; videos * captions] }
    }

    pub fn from_values(videos: usize, captions: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != videos * captions {
            return Err(Error::invalid(format!(
                "score matrix {videos}x{captions} needs {} values, got {}",
                videos * captions,
                values.len()
            )));
        }
        Ok(ScoreMatrix { videos, captions, values })
    }

    pub fn get(&self, video: usize, caption: usize) -> f32 {
        self.values[video * self.captions + caption]
    }

    pub fn set(&mut self, video: usize, caption: usize, value: f32) {
        self.values[video * self.captions + caption] = value;
    }

    pub fn row(&self, video: usize) -> &[f32] {
        &self.values[video * self.captions..(video + 1) * self.captions]
    }

    pub fn column(&self, caption: usize) -> Vec<f32> {
        (0..self.videos).map(|v| self.get(v, caption)).collect()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }
}

/// One retrieval direction's recalls and median rank.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RankReport {
    pub direction: String,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mdr: usize,
}

/// Both directions plus the sum of all six recalls.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub tie_rule: &'static str,
    pub text_to_video: RankReport,
    pub video_to_text: RankReport,
    pub sum_r: f64,
}

/// 1 + number of candidates strictly better than the positive.
pub fn rank_of_positive(scores: &[f32], positive: usize) -> Result<usize> {
    let target = *scores
        .get(positive)
        .ok_or_else(|| Error::invalid(format!("positive index {positive} out of range for {} scores", scores.len())))?;
    Ok(1 + scores.iter().filter(|&&s| s > target).count())
}

fn report_from_ranks(direction: &str, ranks: &[usize]) -> RankReport {
    let n = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    // Even counts take the lower median.
    let mdr = sorted[(sorted.len() - 1) / 2];
    RankReport { direction: direction.to_string(), r1: recall(1), r5: recall(5), r10: recall(10), mdr }
}

/// Evaluate both retrieval directions. `caption_video[j]` is the matrix row
/// of caption j's ground-truth video; videos with several captions count
/// their best-ranked caption in the video-to-text direction.
pub fn evaluate(similarity: &ScoreMatrix, caption_video: &[usize]) -> Result<EvalReport> {
    if caption_video.len() != similarity.captions {
        return Err(Error::invalid(format!(
            "expected one ground-truth video per caption: {} captions, {} mappings",
            similarity.captions,
            caption_video.len()
        )));
    }
    if let Some(&bad) = caption_video.iter().find(|&&v| v >= similarity.videos) {
        return Err(Error::invalid(format!("caption maps to unknown video row {bad}")));
    }

    let mut t2v_ranks = Vec::with_capacity(similarity.captions);
    for (caption, &video) in caption_video.iter().enumerate() {
        let column = similarity.column(caption);
        t2v_ranks.push(rank_of_positive(&column, video)?);
    }

    let mut v2t_ranks = Vec::new();
    for video in 0..similarity.videos {
        let row = similarity.row(video);
        let best = caption_video
            .iter()
            .enumerate()
            .filter(|&(_, &v)| v == video)
            .map(|(caption, _)| rank_of_positive(row, caption))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .min();
        if let Some(best) = best {
            v2t_ranks.push(best);
        }
    }
    if v2t_ranks.is_empty() {
        return Err(Error::invalid("no video has a ground-truth caption".to_string()));
    }

    let text_to_video = report_from_ranks("text_to_video", &t2v_ranks);
    let video_to_text = report_from_ranks("video_to_text", &v2t_ranks);
    let sum_r = text_to_video.r1
        + text_to_video.r5
        + text_to_video.r10
        + video_to_text.r1
        + video_to_text.r5
        + video_to_text.r10;
    Ok(EvalReport { tie_rule: TIE_RULE, text_to_video, video_to_text, sum_r })
}

/// Aligned text table in the usual two-direction layout.
pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("ties: {}\n", report.tie_rule));
    out.push_str("direction        R@1     R@5     R@10    MdR\n");
    for r in [&report.text_to_video, &report.video_to_text] {
        out.push_str(&format!(
            "{:<15} {:>6.1}  {:>6.1}  {:>6.1}  {:>5}\n",
            r.direction, r.r1, r.r5, r.r10, r.mdr
        ));
    }
    out.push_str(&format!("SumR            {:>6.1}\n", report.sum_r));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_counts_strictly_better_candidates() {
        assert_eq!(rank_of_positive(&[0.9, 0.5, 0.7], 0).unwrap(), 1);
        assert_eq!(rank_of_positive(&[0.9, 0.5, 0.7], 1).unwrap(), 3);
        // All-equal scores rank the positive first (optimistic ties).
        assert_eq!(rank_of_positive(&[0.5, 0.5, 0.5], 2).unwrap(), 1);
        assert!(rank_of_positive(&[0.5], 3).is_err());
    }

    #[test]
    fn identity_matrix_scores_perfectly() {
        let mut m = ScoreMatrix::zeros(3, 3);
        for i in 0..3 {
            m.set(i, i, 1.0);
        }
        let report = evaluate(&m, &[0, 1, 2]).unwrap();
        assert_eq!(report.text_to_video.r1, 100.0);
        assert_eq!(report.video_to_text.r1, 100.0);
        assert_eq!(report.text_to_video.mdr, 1);
        assert_eq!(report.sum_r, 600.0);
    }

    #[test]
    fn two_by_two_hand_case() {
        let m = ScoreMatrix::from_values(2, 2, vec![0.9, 0.8, 0.1, 0.95]).unwrap();
        let report = evaluate(&m, &[0, 1]).unwrap();
        assert_eq!(report.text_to_video.r1, 100.0);
        assert_eq!(report.video_to_text.r1, 100.0);
    }

    #[test]
    fn multi_caption_videos_take_their_best_rank() {
        // Two videos, three captions; both of video 0's captions rank behind
        // caption 2 on row 0 except caption 0.
        let m = ScoreMatrix::from_values(2, 3, vec![0.9, 0.2, 0.5, 0.1, 0.8, 0.6]).unwrap();
        let report = evaluate(&m, &[0, 0, 1]).unwrap();
        // Video 0: caption ranks are 1 (0.9) and 3 (0.2) -> best 1.
        // Video 1: caption 2 scores 0.6 on row 1, behind 0.8 -> rank 2.
        assert_eq!(report.video_to_text.r1, 50.0);
        assert_eq!(report.video_to_text.mdr, 1);
    }

    #[test]
    fn unmapped_caption_is_an_error() {
        let m = ScoreMatrix::zeros(2, 2);
        assert!(evaluate(&m, &[0]).is_err());
        assert!(evaluate(&m, &[0, 5]).is_err());
    }

    #[test]
    fn table_and_json_agree() {
        let mut m = ScoreMatrix::zeros(3, 3);
        for i in 0..3 {
            m.set(i, i, 1.0);
        }
        let report = evaluate(&m, &[0, 1, 2]).unwrap();
        let table = format_report(&report);
        assert!(table.contains("SumR"));
        assert!(table.contains("600.0"));
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"sum_r\":600.0"));
    }
}
