//! Procedural synthetic worlds standing in for scanned houses and their
//! instruction datasets.
//!
//! A world is a grid of square rooms. Every room centre is a node and every
//! pair of neighbouring rooms is joined through a doorway node halfway
//! between their centres. Rooms carry one to three object tags. A tag has a
//! fixed signature, twice an axis-aligned unit vector, that is added to the
//! panorama cells looking at the tagged room; the embedding of the tag word
//! is the same unit vector. Cell noise is a base vector shared by the whole
//! world plus small per-cell jitter, bounded by [`NOISE_BOUND`], so the
//! dot product of a tag embedding with a cell exceeds 1 exactly when that
//! tag is visible in the cell.
//!
//! Visibility: from a room centre its own tags fill all 36 cells; from any
//! node, the room reached through a neighbour shows its tags in the three
//! heading bins around that neighbour's direction, at every elevation row.
//!
//! A fraction of rooms is held out. Training and seen-validation routes never
//! enter them; unseen-validation routes end in them. Tag combinations are
//! unique per room, so held-out combinations never occur on training routes.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::episode::{Episode, Split};
use crate::sim::{wrap_angle, NavGraph, NavNode, SimError, BIN_ANGLE, GRID_CELLS, HEADING_BINS};
use crate::tensor::Tensor;

pub const TAG_SCALE: f64 = 2.0;
pub const NOISE_BOUND: f64 = BASE_NOISE + CELL_JITTER;
/// Bound of the base noise vector shared by every cell of the world.
pub const BASE_NOISE: f64 = 0.35;
/// Bound of the independent per-cell perturbation on top of the base vector.
pub const CELL_JITTER: f64 = 0.1;
const FUNCTION_WORD_SCALE: f64 = 0.5;
const INSTRUCTIONS_PER_PATH: usize = 3;
const MAX_ROOM_HOPS: usize = 3;

/// Object vocabulary; the first `n_object_tags` entries are used.
pub const TAG_WORDS: &[&str] = &[
    "sofa", "chair", "table", "bed", "lamp", "plant", "piano", "mirror", "fireplace", "bathtub",
    "sink", "stove", "fridge", "television", "bookshelf", "desk", "painting", "rug", "dresser",
    "toilet", "shower", "wardrobe", "clock", "vase", "bench", "curtain", "stairs", "window",
    "cabinet", "couch", "ottoman", "aquarium",
];

const MOVE_VERBS: &[&str] = &["walk", "go", "head", "move", "proceed"];
const PASS_WORDS: &[&str] = &["through", "past"];
const ENTER_WORDS: &[&str] = &["into", "to", "toward"];

/// Every non-tag word the instruction templates can emit.
pub const FUNCTION_WORDS: &[&str] = &[
    "walk", "go", "head", "move", "proceed", "through", "past", "into", "to", "toward", "the",
    "room", "with", "and", "turn", "left", "right", "continue", "straight", "then", "stop",
    "wait", "there", "in", "at",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible world: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub seed: u64,
    pub rooms_x: usize,
    pub rooms_y: usize,
    pub room_size: f64,
    pub n_object_tags: usize,
    pub feature_dim: usize,
    pub train_episodes: usize,
    pub val_seen_episodes: usize,
    pub val_unseen_episodes: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            rooms_x: 4,
            rooms_y: 4,
            room_size: 4.0,
            n_object_tags: 24,
            feature_dim: 64,
            train_episodes: 400,
            val_seen_episodes: 60,
            val_unseen_episodes: 60,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidSpec(m));
        if self.rooms_x * self.rooms_y < 2 {
            return bad(format!("need at least 2 rooms, got {}x{}", self.rooms_x, self.rooms_y));
        }
        if !(self.room_size.is_finite() && self.room_size > 0.0) {
            return bad(format!("room_size must be positive, got {}", self.room_size));
        }
        if self.n_object_tags == 0 || self.n_object_tags > TAG_WORDS.len() {
            return bad(format!(
                "n_object_tags must be in 1..={}, got {}",
                TAG_WORDS.len(),
                self.n_object_tags
            ));
        }
        if self.feature_dim < self.n_object_tags {
            return bad(format!(
                "feature_dim {} is smaller than n_object_tags {}",
                self.feature_dim, self.n_object_tags
            ));
        }
        Ok(())
    }

    pub fn rooms(&self) -> usize {
        self.rooms_x * self.rooms_y
    }

    /// Rooms held out for the unseen split.
    pub fn unseen_room_count(&self) -> usize {
        if self.val_unseen_episodes == 0 {
            0
        } else {
            (self.rooms() / 5).max(1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Room {
    pub x: usize,
    pub y: usize,
    /// Node index of the room centre.
    pub center: usize,
    /// Sorted tag indices.
    pub tags: Vec<usize>,
    pub unseen: bool,
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub graph: NavGraph,
    pub rooms: Vec<Room>,
    /// Room index for room-centre nodes, `None` for doorways.
    pub node_room: Vec<Option<usize>>,
    pub tag_words: Vec<String>,
    /// `(word, vector)` in file order: tag words first, then function words.
    pub embeddings: Vec<(String, Vec<f64>)>,
    pub episodes: Vec<Episode>,
}

impl World {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().filter(move |e| e.split == split)
    }

    /// Rooms whose centres appear on a path.
    pub fn rooms_on_path(&self, path: &[usize]) -> Vec<usize> {
        path.iter().filter_map(|n| self.node_room[*n]).collect()
    }
}

// Platform-independent integer draws: always sample through u32.
fn pick<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    rng.gen_range(0..n as u32) as usize
}

fn shuffle<T, R: Rng + ?Sized>(rng: &mut R, v: &mut [T]) {
    for i in (1..v.len()).rev() {
        let j = pick(rng, i + 1);
        v.swap(i, j);
    }
}

fn quantize_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize_micro(v: f64) -> f64 {
    libm::round(v * 1e6) / 1e6
}

/// Nearest heading bin for an absolute heading in radians, clockwise from +y.
pub fn heading_to_bin(rad: f64) -> u8 {
    let b = libm::round(rad / BIN_ANGLE) as i64;
    b.rem_euclid(HEADING_BINS as i64) as u8
}

struct Layout {
    nodes: Vec<NavNode>,
    edges: Vec<(usize, usize)>,
    rooms: Vec<Room>,
    node_room: Vec<Option<usize>>,
    // For each node and neighbour, the room seen through that neighbour.
    view_room: BTreeMap<(usize, usize), usize>,
}

fn layout(spec: &WorldSpec) -> Layout {
    let s = spec.room_size;
    let mut nodes = Vec::new();
    let mut rooms = Vec::new();
    let mut node_room = Vec::new();
    for y in 0..spec.rooms_y {
        for x in 0..spec.rooms_x {
            nodes.push(NavNode {
                id: format!("room_{x}_{y}"),
                pos: [x as f64 * s, y as f64 * s, 0.0],
                features: None,
            });
            node_room.push(Some(rooms.len()));
            rooms.push(Room {
                x,
                y,
                center: nodes.len() - 1,
                tags: Vec::new(),
                unseen: false,
            });
        }
    }
    let room_at = |x: usize, y: usize| y * spec.rooms_x + x;
    let mut edges = Vec::new();
    let mut view_room = BTreeMap::new();
    let mut door = |nodes: &mut Vec<NavNode>, id: String, pos: [f64; 3], a: usize, b: usize| {
        nodes.push(NavNode {
            id,
            pos,
            features: None,
        });
        node_room.push(None);
        let d = nodes.len() - 1;
        let (ca, cb) = (rooms[a].center, rooms[b].center);
        edges.push((ca, d));
        edges.push((d, cb));
        view_room.insert((ca, d), b);
        view_room.insert((cb, d), a);
        view_room.insert((d, ca), a);
        view_room.insert((d, cb), b);
    };
    for y in 0..spec.rooms_y {
        for x in 0..spec.rooms_x {
            if x + 1 < spec.rooms_x {
                let pos = [(x as f64 + 0.5) * s, y as f64 * s, 0.0];
                door(&mut nodes, format!("door_{x}_{y}_e"), pos, room_at(x, y), room_at(x + 1, y));
            }
            if y + 1 < spec.rooms_y {
                let pos = [x as f64 * s, (y as f64 + 0.5) * s, 0.0];
                door(&mut nodes, format!("door_{x}_{y}_n"), pos, room_at(x, y), room_at(x, y + 1));
            }
        }
    }
    Layout {
        nodes,
        edges,
        rooms,
        node_room,
        view_room,
    }
}

fn rooms_adjacent(a: &Room, b: &Room) -> bool {
    a.x.abs_diff(b.x) + a.y.abs_diff(b.y) == 1
}

fn seen_rooms_connected(rooms: &[Room], unseen: &BTreeSet<usize>) -> bool {
    let seen: Vec<usize> = (0..rooms.len()).filter(|r| !unseen.contains(r)).collect();
    let Some(&first) = seen.first() else { return false };
    let mut reached = BTreeSet::from([first]);
    let mut stack = vec![first];
    while let Some(u) = stack.pop() {
        for &v in &seen {
            if !reached.contains(&v) && rooms_adjacent(&rooms[u], &rooms[v]) {
                reached.insert(v);
                stack.push(v);
            }
        }
    }
    reached.len() == seen.len()
}

fn choose_unseen<R: Rng + ?Sized>(
    spec: &WorldSpec,
    rooms: &[Room],
    rng: &mut R,
) -> Result<BTreeSet<usize>, WorldError> {
    let k = spec.unseen_room_count();
    if k == 0 {
        return Ok(BTreeSet::new());
    }
    if rooms.len() < k + 2 {
        return Err(WorldError::Infeasible(format!(
            "{} rooms cannot hold out {k} unseen rooms and keep 2 seen rooms",
            rooms.len()
        )));
    }
    for _ in 0..1000 {
        let mut order: Vec<usize> = (0..rooms.len()).collect();
        shuffle(rng, &mut order);
        let set: BTreeSet<usize> = order[..k].iter().copied().collect();
        if seen_rooms_connected(rooms, &set) {
            return Ok(set);
        }
    }
    Err(WorldError::Infeasible(format!(
        "no choice of {k} unseen rooms keeps the seen rooms connected"
    )))
}

fn assign_tags<R: Rng + ?Sized>(
    spec: &WorldSpec,
    rooms: &mut [Room],
    rng: &mut R,
) -> Result<(), WorldError> {
    let mut used: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut seen_tags: BTreeSet<usize> = BTreeSet::new();
    let order: Vec<usize> = (0..rooms.len())
        .filter(|r| !rooms[*r].unseen)
        .chain((0..rooms.len()).filter(|r| rooms[*r].unseen))
        .collect();
    for r in order {
        // Held-out rooms draw from tags already seen so only the combination is novel.
        let pool: Vec<usize> = if rooms[r].unseen && seen_tags.len() >= 2 {
            seen_tags.iter().copied().collect()
        } else {
            (0..spec.n_object_tags).collect()
        };
        let max_tags = 3.min(pool.len());
        let mut placed = false;
        for _ in 0..1000 {
            let count = 1 + pick(rng, max_tags);
            let mut p = pool.clone();
            shuffle(rng, &mut p);
            let mut tags = p[..count].to_vec();
            tags.sort_unstable();
            if used.insert(tags.clone()) {
                if !rooms[r].unseen {
                    seen_tags.extend(tags.iter().copied());
                }
                rooms[r].tags = tags;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(WorldError::Infeasible(format!(
                "cannot give {} rooms distinct tag sets from {} tags",
                rooms.len(),
                spec.n_object_tags
            )));
        }
    }
    Ok(())
}

fn bin_toward(from: &[f64; 3], to: &[f64; 3]) -> usize {
    heading_to_bin(libm::atan2(to[0] - from[0], to[1] - from[1])) as usize
}

fn build_features<R: Rng + ?Sized>(spec: &WorldSpec, lay: &Layout, rng: &mut R) -> Vec<Tensor> {
    let dim = spec.feature_dim;
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); lay.nodes.len()];
    for &(a, b) in &lay.edges {
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    let base: Vec<f64> = (0..dim).map(|_| rng.gen_range(-BASE_NOISE..BASE_NOISE)).collect();
    let mut grids = Vec::with_capacity(lay.nodes.len());
    for (u, node) in lay.nodes.iter().enumerate() {
        let mut visible: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); HEADING_BINS as usize];
        if let Some(r) = lay.node_room[u] {
            for cell in &mut visible {
                cell.extend(lay.rooms[r].tags.iter().copied());
            }
        }
        for &v in &adjacency[u] {
            let room = lay.view_room[&(u, v)];
            let b = bin_toward(&node.pos, &lay.nodes[v].pos);
            for off in [11, 0, 1] {
                visible[(b + off) % 12].extend(lay.rooms[room].tags.iter().copied());
            }
        }
        let mut data = Vec::with_capacity(GRID_CELLS * dim);
        for tags in &visible {
            for _row in 0..3 {
                let start = data.len();
                data.extend(base.iter().map(|b| b + rng.gen_range(-CELL_JITTER..CELL_JITTER)));
                for &t in tags {
                    data[start + t] += TAG_SCALE;
                }
            }
        }
        let data = data.into_iter().map(quantize_f32).collect();
        grids.push(Tensor::from_parts(vec![GRID_CELLS, dim], data));
    }
    grids
}

fn build_embeddings<R: Rng + ?Sized>(spec: &WorldSpec, rng: &mut R) -> Vec<(String, Vec<f64>)> {
    let dim = spec.feature_dim;
    let mut out = Vec::new();
    for (i, w) in TAG_WORDS[..spec.n_object_tags].iter().enumerate() {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        out.push((w.to_string(), v));
    }
    for w in FUNCTION_WORDS {
        let v = (0..dim)
            .map(|d| {
                if d < spec.n_object_tags {
                    0.0
                } else {
                    quantize_micro(rng.gen_range(-FUNCTION_WORD_SCALE..FUNCTION_WORD_SCALE))
                }
            })
            .collect();
        out.push((w.to_string(), v));
    }
    out
}

/// Clockwise turn at interior path node `i`, in radians within (−π, π].
fn turn_at(g: &NavGraph, path: &[usize], i: usize) -> f64 {
    let p = |n: usize| g.node(n).pos;
    let (a, b, c) = (p(path[i - 1]), p(path[i]), p(path[i + 1]));
    let h_in = libm::atan2(b[0] - a[0], b[1] - a[1]);
    let h_out = libm::atan2(c[0] - b[0], c[1] - b[1]);
    wrap_angle(h_out - h_in)
}

fn room_phrase<R: Rng + ?Sized>(tags: &[usize], tag_words: &[String], rng: &mut R) -> String {
    let mut t = tags.to_vec();
    shuffle(rng, &mut t);
    let words: Vec<&str> = t.iter().map(|i| tag_words[*i].as_str()).collect();
    if pick(rng, 2) == 0 {
        format!("the {} room", words.join(" and "))
    } else {
        format!("the room with the {}", words.join(" and the "))
    }
}

/// Fills an instruction template for `path`.
///
/// Mentions the tags of every room entered after the start, in order, with
/// a turn clause at every interior room whose turn exceeds 45°.
pub fn generate_instruction<R: Rng + ?Sized>(path: &[usize], world: &World, rng: &mut R) -> String {
    let g = &world.graph;
    if path.len() == 1 {
        return String::from(["wait there.", "stop there.", "stop and wait there."][pick(rng, 3)]);
    }
    let mut clauses: Vec<String> = Vec::new();
    let last = path.len() - 1;
    for i in 1..=last {
        let Some(room) = world.node_room[path[i]] else { continue };
        let turn = (1..i)
            .rev()
            .find(|k| world.node_room[path[*k]].is_some())
            .map(|k| turn_at(g, path, k));
        if let Some(t) = turn {
            let clause = if t < -PI / 4.0 {
                "turn left"
            } else if t > PI / 4.0 {
                "turn right"
            } else {
                "continue straight"
            };
            clauses.push(String::from(clause));
        }
        let verb = MOVE_VERBS[pick(rng, MOVE_VERBS.len())];
        let phrase = room_phrase(&world.rooms[room].tags, &world.tag_words, rng);
        let prep = if i == last {
            ENTER_WORDS[pick(rng, ENTER_WORDS.len())]
        } else {
            PASS_WORDS[pick(rng, PASS_WORDS.len())]
        };
        clauses.push(format!("{verb} {prep} {phrase}"));
    }
    if clauses.is_empty() {
        clauses.push(String::from(MOVE_VERBS[pick(rng, MOVE_VERBS.len())]));
    }
    let ending = ["stop there", "wait there", "then stop", "stop"][pick(rng, 4)];
    clauses.push(String::from(ending));
    let mut text = clauses.join(", ");
    if let Some(first) = text.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    text.push('.');
    text
}

/// A random shortest room-to-room route as node indices.
fn random_route<R: Rng + ?Sized>(
    lay_rooms: &[Room],
    graph: &NavGraph,
    spec: &WorldSpec,
    from: usize,
    to: usize,
    rng: &mut R,
) -> Vec<usize> {
    let (a, b) = (&lay_rooms[from], &lay_rooms[to]);
    let mut steps: Vec<(i64, i64)> = Vec::new();
    let sx = if b.x > a.x { 1 } else { -1 };
    let sy = if b.y > a.y { 1 } else { -1 };
    steps.extend(core::iter::repeat((sx, 0)).take(a.x.abs_diff(b.x)));
    steps.extend(core::iter::repeat((0, sy)).take(a.y.abs_diff(b.y)));
    shuffle(rng, &mut steps);
    let mut path = vec![a.center];
    let (mut x, mut y) = (a.x as i64, a.y as i64);
    for (dx, dy) in steps {
        let (nx, ny) = (x + dx, y + dy);
        let here = lay_rooms[(y as usize) * spec.rooms_x + x as usize].center;
        let there = lay_rooms[(ny as usize) * spec.rooms_x + nx as usize].center;
        let door = graph
            .neighbors(here)
            .iter()
            .map(|(d, _)| *d)
            .find(|d| graph.edge_length(*d, there).is_some())
            .expect("neighbouring rooms share a doorway");
        path.push(door);
        path.push(there);
        x = nx;
        y = ny;
    }
    path
}

fn room_distance(a: &Room, b: &Room) -> usize {
    a.x.abs_diff(b.x) + a.y.abs_diff(b.y)
}

/// Builds the graph, features, embeddings and all three episode splits.
pub fn generate_world(spec: &WorldSpec) -> Result<World, WorldError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut lay = layout(spec);
    let unseen = choose_unseen(spec, &lay.rooms, &mut rng)?;
    for r in &unseen {
        lay.rooms[*r].unseen = true;
    }
    assign_tags(spec, &mut lay.rooms, &mut rng)?;
    let grids = build_features(spec, &lay, &mut rng);
    let mut nodes = lay.nodes.clone();
    for (n, g) in nodes.iter_mut().zip(grids) {
        n.features = Some(g);
    }
    let graph = NavGraph::from_indices(nodes, &lay.edges)?;
    let embeddings = build_embeddings(spec, &mut rng);
    let mut world = World {
        spec: spec.clone(),
        graph,
        rooms: lay.rooms,
        node_room: lay.node_room,
        tag_words: TAG_WORDS[..spec.n_object_tags].iter().map(|s| s.to_string()).collect(),
        embeddings,
        episodes: Vec::new(),
    };
    generate_episodes(&mut world, &mut rng)?;
    Ok(world)
}

fn generate_episodes<R: Rng + ?Sized>(world: &mut World, rng: &mut R) -> Result<(), WorldError> {
    let spec = world.spec.clone();
    let n_rooms = world.rooms.len();
    let mut path_id = 0u64;
    let mut train_routes: BTreeSet<Vec<usize>> = BTreeSet::new();
    let targets = [
        (Split::Train, spec.train_episodes),
        (Split::ValSeen, spec.val_seen_episodes),
        (Split::ValUnseen, spec.val_unseen_episodes),
    ];
    for (split, target) in targets {
        let pairs: Vec<(usize, usize)> = (0..n_rooms)
            .flat_map(|a| (0..n_rooms).map(move |b| (a, b)))
            .filter(|&(a, b)| {
                let (ra, rb) = (&world.rooms[a], &world.rooms[b]);
                let d = room_distance(ra, rb);
                d >= 1
                    && d <= MAX_ROOM_HOPS
                    && match split {
                        Split::ValUnseen => rb.unseen && !ra.unseen,
                        _ => !ra.unseen && !rb.unseen,
                    }
            })
            .collect();
        if target > 0 && pairs.is_empty() {
            return Err(WorldError::Infeasible(format!(
                "no room pairs available for the {split} split"
            )));
        }
        let mut produced = 0;
        let mut attempts = 0;
        while produced < target {
            attempts += 1;
            let (a, b) = pairs[pick(rng, pairs.len())];
            let path = random_route(&world.rooms, &world.graph, &spec, a, b, rng);
            let rooms = world.rooms_on_path(&path);
            let allowed = match split {
                Split::ValUnseen => true,
                _ => rooms.iter().all(|r| !world.rooms[*r].unseen),
            };
            if !allowed {
                continue;
            }
            // Prefer validation routes that never occur in training.
            if split == Split::ValSeen && train_routes.contains(&path) && attempts < 20 * target {
                continue;
            }
            if split == Split::Train {
                train_routes.insert(path.clone());
            }
            let start_heading = pick(rng, HEADING_BINS as usize) as u8;
            let n = INSTRUCTIONS_PER_PATH.min(target - produced);
            for k in 0..n {
                let instruction = generate_instruction(&path, world, rng);
                world.episodes.push(Episode {
                    id: format!("{path_id}_{k}"),
                    path_id,
                    path: path.clone(),
                    start_heading,
                    instruction,
                    split,
                });
            }
            produced += n;
            path_id += 1;
        }
    }
    Ok(())
}
