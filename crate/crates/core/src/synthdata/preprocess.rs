//! Annotation cleanup and line-to-segment packing.

use serde::{Deserialize, Serialize};

fn is_vowel(c: char) -> bool {
    matches!(c.to_ascii_lowercase(), 'a' | 'e' | 'i' | 'o' | 'u')
}

/// Collapses every run of three or more identical vowels to one vowel.
/// Shorter runs are kept as they are.
pub fn clean_lyrics(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let mut j = i + 1;
        while j < chars.len() && chars[j] == c {
            j += 1;
        }
        let run = j - i;
        if is_vowel(c) && run >= 3 {
            out.push(c);
        } else {
            out.extend(std::iter::repeat(c).take(run));
        }
        i = j;
    }
    out
}

/// Consecutive lyric lines packed into one training segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub lines: Vec<String>,
    pub frame_counts: Vec<usize>,
}

impl Segment {
    pub fn total_frames(&self) -> usize {
        self.frame_counts.iter().sum()
    }

    /// Lines joined with single spaces.
    pub fn text(&self) -> String {
        self.lines.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {index} ({text:?}) spans {frames} frames, more than the segment limit {max_frames}")]
pub struct LineTooLong {
    pub index: usize,
    pub text: String,
    pub frames: usize,
    pub max_frames: usize,
}

/// Greedy left-to-right packing: a line joins the open segment unless that
/// would push it past `max_frames`, in which case a new segment starts.
pub fn merge_segments(lines: &[(String, usize)], max_frames: usize) -> Result<Vec<Segment>, LineTooLong> {
    let mut out: Vec<Segment> = Vec::new();
    let mut open: Option<Segment> = None;
    for (index, (text, frames)) in lines.iter().enumerate() {
        if *frames > max_frames {
            return Err(LineTooLong {
                index,
                text: text.clone(),
                frames: *frames,
                max_frames,
            });
        }
        match &mut open {
            Some(seg) if seg.total_frames() + frames <= max_frames => {
                seg.lines.push(text.clone());
                seg.frame_counts.push(*frames);
            }
            _ => {
                if let Some(done) = open.take() {
                    out.push(done);
                }
                open = Some(Segment {
                    lines: vec![text.clone()],
                    frame_counts: vec![*frames],
                });
            }
        }
    }
    out.extend(open);
    Ok(out)
}
