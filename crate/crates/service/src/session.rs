//! Per-session state machine. Everything here is synchronous; the HTTP layer
//! serializes access through one mutex per session.

use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clicktrack_core::geometry::{BBox, Point};
use clicktrack_core::tracker::{tracker_init, TrackRecord, TrackerConfig, TrackerState};
use clicktrack_core::training::synth::SyntheticObject;
use clicktrack_core::{Image, RefinerOutput};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    AwaitingClick,
    Refined,
    Tracking,
    Finished,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceInfo {
    Scene { scene: String },
    Upload { frames: usize },
}

/// One refine call: the initial click or a correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub frame: usize,
    pub point: Point,
    pub category: Option<String>,
    pub output: RefinerOutput,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StreamEvent {
    Frame {
        generation: u64,
        #[serde(flatten)]
        record: TrackRecord,
    },
    /// Results from `frame` on were discarded and tracking restarts there.
    Correction { generation: u64, frame: usize },
    Finished { generation: u64 },
    Failed { generation: u64, message: String },
}

impl StreamEvent {
    pub fn name(&self) -> &'static str {
        match self {
            StreamEvent::Frame { .. } => "frame",
            StreamEvent::Correction { .. } => "correction",
            StreamEvent::Finished { .. } => "finished",
            StreamEvent::Failed { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub id: String,
    pub source: SourceInfo,
    pub frames: usize,
    pub state: SessionState,
    pub generation: u64,
    pub refinement: Option<Refinement>,
    pub refinements: Vec<Refinement>,
    pub results: Vec<TrackRecord>,
    pub latencies_ms: Vec<f64>,
    pub error: Option<String>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub struct Session {
    pub id: String,
    pub source: SourceInfo,
    pub frames: Arc<Vec<Image>>,
    pub ground_truth: Option<Arc<Vec<SyntheticObject>>>,
    pub state: SessionState,
    pub refinements: Vec<Refinement>,
    /// Records for frames `1..`, in frame order without gaps.
    pub results: Vec<TrackRecord>,
    pub generation: u64,
    pub error: Option<String>,
    pub created_ms: u64,
    pub updated_ms: u64,
    tracker: Option<TrackerState>,
    tracker_config: TrackerConfig,
    events: broadcast::Sender<StreamEvent>,
}

impl Session {
    pub fn new(
        id: String,
        source: SourceInfo,
        frames: Arc<Vec<Image>>,
        ground_truth: Option<Arc<Vec<SyntheticObject>>>,
        tracker_config: TrackerConfig,
    ) -> Self {
        let now = now_ms();
        Self {
            id,
            source,
            frames,
            ground_truth,
            state: SessionState::AwaitingClick,
            refinements: Vec::new(),
            results: Vec::new(),
            generation: 0,
            error: None,
            created_ms: now,
            updated_ms: now,
            tracker: None,
            tracker_config,
            events: broadcast::channel(1024).0,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<StreamEvent> {
        self.events.subscribe()
    }

    fn emit(&self, e: StreamEvent) {
        // No subscribers is fine; results stay available for polling.
        let _ = self.events.send(e);
    }

    fn touch(&mut self) {
        self.updated_ms = now_ms();
    }

    pub fn frame(&self, index: usize) -> Result<&Image, ApiError> {
        self.frames.get(index).ok_or_else(|| {
            ApiError::not_found(format!("frame {index} out of range for {} frames", self.frames.len()))
        })
    }

    /// Point must lie inside `frame`.
    pub fn check_point(&self, frame: usize, p: Point) -> Result<(), ApiError> {
        let size = self.frame(frame)?.size();
        if !p.is_finite() || !p.within(size) {
            return Err(ApiError::out_of_bounds(p, size));
        }
        Ok(())
    }

    pub fn check_click(&self, p: Point) -> Result<(), ApiError> {
        if !matches!(self.state, SessionState::AwaitingClick | SessionState::Refined) {
            return Err(ApiError::invalid_state("click", self.state));
        }
        self.check_point(0, p)
    }

    pub fn apply_click(&mut self, r: Refinement) {
        self.refinements.push(r);
        self.state = SessionState::Refined;
        self.touch();
    }

    /// Moves a refined session into tracking from frame 0 and returns the
    /// generation the tracking loop must carry.
    pub fn begin_tracking(&mut self) -> Result<u64, ApiError> {
        if self.state != SessionState::Refined {
            return Err(ApiError::invalid_state("track", self.state));
        }
        let b0 = self.refinements.last().expect("refined sessions hold a refinement").output.final_box;
        self.results.clear();
        self.start_from(0, b0)
    }

    /// A correction on `frame` is allowed once every earlier frame has a
    /// result.
    pub fn check_correction(&self, frame: usize, p: Point) -> Result<(), ApiError> {
        self.check_point(frame, p)?;
        if frame > self.results.len() + 1 {
            return Err(ApiError::frame_not_reached(frame, self.results.len()));
        }
        Ok(())
    }

    /// Keeps results before `frame`, records the refined box on `frame`
    /// itself and restarts tracking after it.
    pub fn apply_correction(&mut self, r: Refinement) -> Result<u64, ApiError> {
        let frame = r.frame;
        let b = r.output.final_box;
        let score = r.output.iou_scores.get(r.output.selected_index).copied().unwrap_or(1.0);
        self.refinements.push(r);
        self.results.truncate(frame.saturating_sub(1));
        if frame > 0 {
            self.results.push(TrackRecord { frame, bbox: b, score });
        }
        self.emit(StreamEvent::Correction {
            generation: self.generation + 1,
            frame,
        });
        self.state = SessionState::Refined;
        self.start_from(frame, b)
    }

    fn start_from(&mut self, frame: usize, b: BBox) -> Result<u64, ApiError> {
        self.generation += 1;
        self.error = None;
        self.touch();
        match tracker_init(&self.frames[frame], &b, &self.tracker_config) {
            Ok(t) => {
                self.tracker = Some(t);
                self.state = SessionState::Tracking;
                if frame + 1 >= self.frames.len() {
                    self.finish();
                }
                Ok(self.generation)
            }
            Err(e) => {
                self.fail(e.to_string());
                Err(ApiError::tracker_init(e.to_string()))
            }
        }
    }

    fn finish(&mut self) {
        self.state = SessionState::Finished;
        self.tracker = None;
        self.emit(StreamEvent::Finished {
            generation: self.generation,
        });
        self.touch();
    }

    fn fail(&mut self, message: String) {
        self.state = SessionState::Error;
        self.tracker = None;
        self.error = Some(message.clone());
        self.emit(StreamEvent::Failed {
            generation: self.generation,
            message,
        });
        self.touch();
    }

    /// Tracks one more frame for `generation`. Returns false once there is
    /// nothing left to do for it, either because the sequence ended or a
    /// newer generation took over.
    pub fn track_next(&mut self, generation: u64) -> bool {
        if generation != self.generation || self.state != SessionState::Tracking {
            return false;
        }
        let next = self.results.last().map_or(1, |r| r.frame + 1);
        let Some(tracker) = self.tracker.as_mut() else {
            return false;
        };
        let bbox = tracker.step(&self.frames[next]);
        let record = TrackRecord {
            frame: next,
            bbox,
            score: tracker.score(),
        };
        self.results.push(record);
        self.emit(StreamEvent::Frame { generation, record });
        if next + 1 >= self.frames.len() {
            self.finish();
            return false;
        }
        self.touch();
        true
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            id: self.id.clone(),
            source: self.source.clone(),
            frames: self.frames.len(),
            state: self.state,
            generation: self.generation,
            refinement: self.refinements.last().cloned(),
            refinements: self.refinements.clone(),
            results: self.results.clone(),
            latencies_ms: self.refinements.iter().map(|r| r.latency_ms).collect(),
            error: self.error.clone(),
            created_ms: self.created_ms,
            updated_ms: self.updated_ms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clicktrack_core::refiners::guidance::GuidanceKind;
    use clicktrack_core::refiners::RefinerKind;

    fn frames(n: usize) -> Arc<Vec<Image>> {
        Arc::new(
            (0..n)
                .map(|t| {
                    let data = (0..32 * 32 * 3).map(|i| (((i / 3 + t) * 37) % 251) as f32 / 250.0).collect();
                    Image::new(32, 32, data).unwrap()
                })
                .collect(),
        )
    }

    fn refinement(frame: usize, b: BBox) -> Refinement {
        Refinement {
            frame,
            point: b.center(),
            category: None,
            output: RefinerOutput {
                refiner: RefinerKind::Pfr,
                final_box: b,
                stage_boxes: vec![b],
                iou_scores: Vec::new(),
                selected_index: 0,
                guidance_kind: GuidanceKind::Learnable,
            },
            latency_ms: 1.0,
        }
    }

    fn session(n: usize) -> Session {
        Session::new("s".into(), SourceInfo::Upload { frames: n }, frames(n), None, TrackerConfig::default())
    }

    #[test]
    fn happy_path_runs_to_finished() {
        let mut s = session(5);
        assert!(s.begin_tracking().is_err());
        s.apply_click(refinement(0, BBox::new(8.0, 8.0, 20.0, 20.0).unwrap()));
        let g = s.begin_tracking().unwrap();
        while s.track_next(g) {}
        assert_eq!(s.state, SessionState::Finished);
        let frames: Vec<usize> = s.results.iter().map(|r| r.frame).collect();
        assert_eq!(frames, vec![1, 2, 3, 4]);
    }

    #[test]
    fn correction_keeps_earlier_results_and_stops_the_old_loop() {
        let mut s = session(8);
        s.apply_click(refinement(0, BBox::new(8.0, 8.0, 20.0, 20.0).unwrap()));
        let g = s.begin_tracking().unwrap();
        while s.track_next(g) {}
        let before = s.results.clone();
        let g2 = s.apply_correction(refinement(4, BBox::new(4.0, 4.0, 16.0, 16.0).unwrap())).unwrap();
        assert!(!s.track_next(g));
        assert_eq!(&s.results[..3], &before[..3]);
        assert_eq!(s.results[3].bbox, BBox::new(4.0, 4.0, 16.0, 16.0).unwrap());
        while s.track_next(g2) {}
        assert_eq!(s.results.len(), 7);
        assert_eq!(s.state, SessionState::Finished);
    }

    #[test]
    fn correction_beyond_tracked_frames_is_rejected() {
        let s = session(8);
        assert!(s.check_correction(0, Point::new(5.0, 5.0)).is_ok());
        assert!(s.check_correction(1, Point::new(5.0, 5.0)).is_ok());
        assert!(s.check_correction(2, Point::new(5.0, 5.0)).is_err());
        assert!(s.check_correction(0, Point::new(-5.0, 5.0)).is_err());
    }
}
