//! Keyframes, landmarks, observations and the covisibility graph.

use std::collections::{BTreeMap, BTreeSet};

use crate::factors::{make_tangent_basis, FrameNormal, GlobalNormal, KeyframeId, LandmarkId, TangentBasis};
use crate::geometry::{Point3, PoseSE3, StereoPixel};

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: KeyframeId,
    /// Index of the input frame this keyframe was created from.
    pub frame_id: usize,
    pub pose: PoseSE3,
    pub normal: Option<FrameNormal>,
    /// Tangent basis of `normal`, built once at insertion.
    pub basis: Option<TangentBasis>,
    /// Landmarks observed by this keyframe.
    pub landmarks: BTreeSet<LandmarkId>,
    /// Landmarks linked when the keyframe was inserted; the reference for
    /// keyframe selection.
    pub inserted_observations: usize,
    /// Set while the pose is held constant by the most recent BA call.
    pub fixed: bool,
}

impl Keyframe {
    pub fn new(id: KeyframeId, frame_id: usize, pose: PoseSE3, normal: Option<FrameNormal>) -> Self {
        Self {
            id,
            frame_id,
            pose,
            basis: normal.as_ref().map(make_tangent_basis),
            normal,
            landmarks: BTreeSet::new(),
            inserted_observations: 0,
            fixed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: LandmarkId,
    pub position: Point3,
    pub observers: BTreeSet<KeyframeId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapObservation {
    pub pixel: StereoPixel,
    pub weight: f64,
}

/// The optimization state: keyframe poses, landmark positions and the world
/// normal prior, plus the observation and covisibility bookkeeping.
#[derive(Debug, Clone)]
pub struct MapState {
    pub keyframes: BTreeMap<KeyframeId, Keyframe>,
    pub landmarks: BTreeMap<LandmarkId, Landmark>,
    pub observations: BTreeMap<(KeyframeId, LandmarkId), MapObservation>,
    /// Shared-landmark counts keyed by `(a, b)` with `a < b`.
    covisibility: BTreeMap<(KeyframeId, KeyframeId), usize>,
    pub global_normal: Option<GlobalNormal>,
    /// Keyframe insertions left before the global normal is frozen.
    pub normal_init_remaining: usize,
    next_keyframe_id: KeyframeId,
}

fn edge(a: KeyframeId, b: KeyframeId) -> (KeyframeId, KeyframeId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl MapState {
    pub fn new(normal_init_window: usize) -> Self {
        Self {
            keyframes: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            observations: BTreeMap::new(),
            covisibility: BTreeMap::new(),
            global_normal: None,
            normal_init_remaining: normal_init_window,
            next_keyframe_id: 0,
        }
    }

    /// The keyframe that anchors the gauge.
    pub fn first_keyframe(&self) -> Option<KeyframeId> {
        self.keyframes.keys().next().copied()
    }

    pub fn last_keyframe(&self) -> Option<&Keyframe> {
        self.keyframes.values().next_back()
    }

    pub fn normal_is_free(&self) -> bool {
        self.normal_init_remaining > 0 && self.global_normal.is_some()
    }

    pub(crate) fn add_keyframe(&mut self, frame_id: usize, pose: PoseSE3, normal: Option<FrameNormal>) -> KeyframeId {
        let id = self.next_keyframe_id;
        self.next_keyframe_id += 1;
        self.keyframes.insert(id, Keyframe::new(id, frame_id, pose, normal));
        id
    }

    pub(crate) fn add_landmark(&mut self, id: LandmarkId, position: Point3) {
        self.landmarks.insert(id, Landmark { id, position, observers: BTreeSet::new() });
    }

    /// Links an existing keyframe and landmark. Returns false if the pair is
    /// already linked or either end is missing.
    pub(crate) fn add_observation(&mut self, kf: KeyframeId, lm: LandmarkId, obs: MapObservation) -> bool {
        if self.observations.contains_key(&(kf, lm)) || !self.keyframes.contains_key(&kf) {
            return false;
        }
        let Some(landmark) = self.landmarks.get_mut(&lm) else {
            return false;
        };
        for &other in &landmark.observers {
            *self.covisibility.entry(edge(kf, other)).or_insert(0) += 1;
        }
        landmark.observers.insert(kf);
        self.keyframes.get_mut(&kf).expect("checked above").landmarks.insert(lm);
        self.observations.insert((kf, lm), obs);
        true
    }

    /// Unlinks a keyframe and landmark, deleting the landmark once it has no
    /// observers left. Returns whether the landmark was deleted.
    pub(crate) fn remove_observation(&mut self, kf: KeyframeId, lm: LandmarkId) -> bool {
        if self.observations.remove(&(kf, lm)).is_none() {
            return false;
        }
        if let Some(k) = self.keyframes.get_mut(&kf) {
            k.landmarks.remove(&lm);
        }
        let landmark = self.landmarks.get_mut(&lm).expect("observation references a landmark");
        landmark.observers.remove(&kf);
        for &other in &landmark.observers {
            let key = edge(kf, other);
            if let Some(c) = self.covisibility.get_mut(&key) {
                *c -= 1;
                if *c == 0 {
                    self.covisibility.remove(&key);
                }
            }
        }
        if landmark.observers.is_empty() {
            self.landmarks.remove(&lm);
            true
        } else {
            false
        }
    }

    /// Number of landmarks observed by both keyframes.
    pub fn shared_landmarks(&self, a: KeyframeId, b: KeyframeId) -> usize {
        self.covisibility.get(&edge(a, b)).copied().unwrap_or(0)
    }

    /// Covisibility edges `(a, b, count)` with `a < b`.
    pub fn covisibility_edges(&self) -> impl Iterator<Item = (KeyframeId, KeyframeId, usize)> + '_ {
        self.covisibility.iter().map(|(&(a, b), &c)| (a, b, c))
    }

    /// Keyframes sharing at least `min_shared` landmarks with `kf`, most
    /// strongly connected first (ties by id).
    pub fn covisible_keyframes(&self, kf: KeyframeId, min_shared: usize) -> Vec<(KeyframeId, usize)> {
        let mut out: Vec<_> = self
            .covisibility
            .iter()
            .filter_map(|(&(a, b), &c)| {
                if c < min_shared {
                    None
                } else if a == kf {
                    Some((b, c))
                } else if b == kf {
                    Some((a, c))
                } else {
                    None
                }
            })
            .collect();
        out.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        out
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        for &(kf, lm) in self.observations.keys() {
            let k = self.keyframes.get(&kf).ok_or(format!("observation ({kf},{lm}) has no keyframe"))?;
            let l = self.landmarks.get(&lm).ok_or(format!("observation ({kf},{lm}) has no landmark"))?;
            if !k.landmarks.contains(&lm) || !l.observers.contains(&kf) {
                return Err(format!("observation ({kf},{lm}) not cross-linked"));
            }
        }
        for l in self.landmarks.values() {
            if l.observers.is_empty() {
                return Err(format!("landmark {} has no observations", l.id));
            }
            for kf in &l.observers {
                if !self.observations.contains_key(&(*kf, l.id)) {
                    return Err(format!("landmark {} lists observer {kf} without observation", l.id));
                }
            }
        }
        let mut counts: BTreeMap<(KeyframeId, KeyframeId), usize> = BTreeMap::new();
        for l in self.landmarks.values() {
            let obs: Vec<_> = l.observers.iter().copied().collect();
            for i in 0..obs.len() {
                for j in i + 1..obs.len() {
                    *counts.entry(edge(obs[i], obs[j])).or_insert(0) += 1;
                }
            }
        }
        if counts != self.covisibility {
            return Err("covisibility counts differ from shared-landmark counts".into());
        }
        for k in self.keyframes.values() {
            if let (Some(n), Some(b)) = (&k.normal, &k.basis) {
                if *b != make_tangent_basis(n) {
                    return Err(format!("keyframe {} basis does not match its normal", k.id));
                }
            }
        }
        Ok(())
    }
}
