//! Scene state shared with clients and its fold over trace events.

use serde::{Deserialize, Serialize};

use crate::path::Foothold;
use crate::sequencer::BuildPlan;
use crate::simulator::{EventKind, SimConfig, SimEvent};
use crate::tiler::{BlockPattern, BlockPlacement, Role, Rotation};
use crate::voxel::{Cell, DEFAULT_PITCH_MM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub pitch_mm: f64,
    pub origin_mm: [f64; 3],
    pub dims: [usize; 3],
}

/// Editable region; `max` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Cell,
    pub max: Cell,
}

impl Bounds {
    pub fn around(dims: [usize; 3], pad: i32) -> Self {
        let d = dims.map(|v| v as i32);
        Bounds { min: [-pad, -pad, 0], max: [d[0] + pad, d[1] + pad, d[2] + pad] }
    }

    pub fn contains(&self, c: Cell) -> bool {
        (0..3).all(|i| c[i] >= self.min[i] && c[i] < self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedView {
    pub id: String,
    pub cell: Cell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotPhase {
    Idle,
    Loading,
    Walking,
    Placing,
    Stomping,
    WaitingBarrier,
    Realigning,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotView {
    pub id: String,
    pub feed_id: String,
    pub stance: Option<Foothold>,
    pub phase: RobotPhase,
    pub carrying: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStatus {
    /// Painted but not planned yet.
    Target,
    Planned,
    Placed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockView {
    pub pattern: BlockPattern,
    pub anchor: Cell,
    pub rot: Rotation,
    pub role: Role,
    pub status: BlockStatus,
    /// Index of the drop-order step, once planned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

impl BlockView {
    pub fn target(p: &BlockPlacement) -> Self {
        BlockView { pattern: p.pattern, anchor: p.anchor, rot: p.rot, role: p.role, status: BlockStatus::Target, step: None }
    }

    pub fn placement(&self) -> BlockPlacement {
        BlockPlacement::new(self.pattern, self.anchor, self.rot, self.role)
    }
}

/// Everything a client renders. Pure fold of the planned scene and events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub grid: GridInfo,
    pub bounds: Bounds,
    pub feeds: Vec<FeedView>,
    pub robots: Vec<RobotView>,
    pub blocks: Vec<BlockView>,
    /// Events folded in so far.
    pub event_count: usize,
    pub last_event_t: f64,
}

impl SceneModel {
    pub fn empty(grid: GridInfo, bounds: Bounds) -> Self {
        SceneModel { grid, bounds, feeds: Vec::new(), robots: Vec::new(), blocks: Vec::new(), event_count: 0, last_event_t: 0.0 }
    }

    /// Scene at t = 0 of a plan: every plan placement planned, robots at their feeds.
    pub fn planned(&self, plan: &BuildPlan) -> Self {
        let mut s = self.clone();
        let mut step = vec![None; plan.placements.len()];
        for (k, group) in plan.order.iter().enumerate() {
            for &i in group {
                step[i] = Some(k);
            }
        }
        s.blocks = plan
            .placements
            .iter()
            .enumerate()
            .map(|(i, p)| BlockView { status: BlockStatus::Planned, step: step[i], ..BlockView::target(p) })
            .collect();
        for r in &mut s.robots {
            r.stance = plan.robots.iter().find(|rp| rp.robot_id == r.id).map(|rp| rp.feed_stance);
            r.phase = RobotPhase::Idle;
            r.carrying = 0;
        }
        s.event_count = 0;
        s.last_event_t = 0.0;
        s
    }

    pub fn apply(&mut self, e: &SimEvent) {
        self.event_count += 1;
        self.last_event_t = e.t;
        if e.kind == EventKind::BlockPlaced {
            if let Some(b) = e.placement.and_then(|i| self.blocks.get_mut(i)) {
                b.status = BlockStatus::Placed;
            }
        }
        let Some(r) = self.robots.iter_mut().find(|r| r.id == e.robot) else {
            return;
        };
        let realigning = r.phase == RobotPhase::Realigning;
        match e.kind {
            EventKind::Step => {
                r.stance = e.stance.or(r.stance);
                if !realigning {
                    r.phase = RobotPhase::Walking;
                }
            }
            EventKind::Load => {
                r.phase = RobotPhase::Loading;
                r.carrying = e.count.unwrap_or(0);
            }
            EventKind::Drop | EventKind::BarrierRelease => r.phase = RobotPhase::Placing,
            EventKind::Stomp => r.phase = RobotPhase::Stomping,
            EventKind::BlockPlaced => {
                r.carrying = r.carrying.saturating_sub(1);
                r.phase = RobotPhase::Idle;
            }
            EventKind::BarrierWait => r.phase = RobotPhase::WaitingBarrier,
            EventKind::RealignStart => r.phase = RobotPhase::Realigning,
            EventKind::RealignDone => r.phase = RobotPhase::Walking,
            EventKind::Done => r.phase = RobotPhase::Done,
        }
    }

    pub fn placed_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.status == BlockStatus::Placed).count()
    }
}

fn scene_schema_version() -> u32 {
    1
}

fn default_pitch() -> f64 {
    DEFAULT_PITCH_MM
}

fn default_capacity() -> usize {
    2
}

fn default_pad() -> i32 {
    4
}

/// Starting scene for `serve`. Raw `voxels` are tiled with `patterns` on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(default = "scene_schema_version")]
    pub schema_version: u32,
    #[serde(default = "default_pitch")]
    pub pitch_mm: f64,
    #[serde(default)]
    pub origin_mm: [f64; 3],
    pub dims: [usize; 3],
    /// Cells of padding around the grid where feeds may go.
    #[serde(default = "default_pad")]
    pub pad: i32,
    #[serde(default)]
    pub targets: Vec<BlockPlacement>,
    #[serde(default)]
    pub voxels: Vec<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patterns: Option<String>,
    /// One robot is created per feed.
    #[serde(default)]
    pub feeds: Vec<Cell>,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub seed: u64,
}

impl SceneFile {
    /// 4x4x4 cube tiled into 4x2x2 blocks with one feed and robot.
    pub fn cube_fixture() -> Self {
        let grid = crate::fixtures::cube_grid(4);
        let tiling = crate::tiler::tile(&grid, &[BlockPattern::new(4, 2, 2), BlockPattern::UNIT]).expect("unit present");
        SceneFile {
            schema_version: 1,
            pitch_mm: DEFAULT_PITCH_MM,
            origin_mm: [0.0; 3],
            dims: [4, 4, 4],
            pad: default_pad(),
            targets: tiling.placements,
            voxels: Vec::new(),
            patterns: None,
            feeds: crate::fixtures::default_feeds(&grid, 1),
            capacity: 2,
            sim: SimConfig::default(),
            seed: 0,
        }
    }
}
