//! BVH motion-capture files: hierarchy/motion parsing, writing, native FK,
//! and conversion to and from the canonical rig.
//!
//! The exported rig makes the tree recurrence `P[n] = P[parent] + R[n]*o[n]`
//! representable in BVH's parent-rotates-child semantics by splitting every
//! non-root joint into a zero-offset node that carries the rotation channels
//! and a channel-less tip node (an End Site for leaves) that carries the bone
//! offset. Rotation channels are written in ZYX order, degrees.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::rotation::{
    euler_to_matrix, mat_mul, mat_vec, quat_to_euler, Mat3, Representation, RotationSeq,
    MAT3_IDENTITY,
};
use crate::skeleton::{build_tpose, Skeleton};
use crate::topology::{GROUP_COUNT, JOINT_COUNT, REST_DIRECTIONS, TOPOLOGY};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    XPosition,
    YPosition,
    ZPosition,
    XRotation,
    YRotation,
    ZRotation,
}

impl Channel {
    fn parse(s: &str, line: usize) -> Result<Self> {
        match s {
            "Xposition" => Ok(Channel::XPosition),
            "Yposition" => Ok(Channel::YPosition),
            "Zposition" => Ok(Channel::ZPosition),
            "Xrotation" => Ok(Channel::XRotation),
            "Yrotation" => Ok(Channel::YRotation),
            "Zrotation" => Ok(Channel::ZRotation),
            other => Err(Error::parse(format!("line {line}"), format!("unknown channel '{other}'"))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Channel::XPosition => "Xposition",
            Channel::YPosition => "Yposition",
            Channel::ZPosition => "Zposition",
            Channel::XRotation => "Xrotation",
            Channel::YRotation => "Yrotation",
            Channel::ZRotation => "Zrotation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BvhNode {
    pub name: String,
    pub offset: [f64; 3],
    pub channels: Vec<Channel>,
    pub children: Vec<BvhNode>,
    pub end_site: Option<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct BvhDocument {
    pub root: BvhNode,
    pub frame_time: f64,
    /// Per-frame channel values in depth-first hierarchy order.
    pub frames: Vec<Vec<f64>>,
}

impl BvhDocument {
    pub fn channel_count(&self) -> usize {
        fn count(n: &BvhNode) -> usize {
            n.channels.len() + n.children.iter().map(count).sum::<usize>()
        }
        count(&self.root)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

// --- parsing -----------------------------------------------------------------

struct Tokens<'a> {
    items: Vec<(usize, &'a str)>, // (line number, token)
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            for tok in line.split_whitespace() {
                items.push((i + 1, tok));
            }
        }
        Self { items, pos: 0 }
    }

    fn next(&mut self) -> Result<(usize, &'a str)> {
        let item = self.items.get(self.pos).copied().ok_or_else(|| {
            Error::parse("end of file", "unexpected end of BVH data")
        })?;
        self.pos += 1;
        Ok(item)
    }

    fn expect(&mut self, what: &str) -> Result<usize> {
        let (line, tok) = self.next()?;
        if tok != what {
            return Err(Error::parse(format!("line {line}"), format!("expected '{what}', found '{tok}'")));
        }
        Ok(line)
    }

    fn number(&mut self) -> Result<f64> {
        let (line, tok) = self.next()?;
        tok.parse::<f64>()
            .map_err(|_| Error::parse(format!("line {line}"), format!("expected a number, found '{tok}'")))
    }

    fn integer(&mut self) -> Result<usize> {
        let (line, tok) = self.next()?;
        tok.parse::<usize>()
            .map_err(|_| Error::parse(format!("line {line}"), format!("expected an integer, found '{tok}'")))
    }
}

pub fn parse_bvh(text: &str) -> Result<BvhDocument> {
    let mut tk = Tokens::new(text);
    tk.expect("HIERARCHY")?;
    tk.expect("ROOT")?;
    let (_, name) = tk.next()?;
    let root = parse_node(&mut tk, name.to_string())?;

    tk.expect("MOTION")?;
    tk.expect("Frames:")?;
    let frame_count = tk.integer()?;
    let (line, tok) = tk.next()?;
    if tok != "Frame" {
        return Err(Error::parse(format!("line {line}"), format!("expected 'Frame Time:', found '{tok}'")));
    }
    tk.expect("Time:")?;
    let frame_time = tk.number()?;
    if frame_time <= 0.0 {
        return Err(Error::parse(format!("line {line}"), format!("frame time {frame_time} must be positive")));
    }

    let doc_head = BvhDocument { root, frame_time, frames: Vec::new() };
    let per_frame = doc_head.channel_count();
    let mut frames = Vec::with_capacity(frame_count);
    for f in 0..frame_count {
        let mut row = Vec::with_capacity(per_frame);
        for c in 0..per_frame {
            row.push(tk.number().map_err(|e| match e {
                Error::Parse { location, .. } => Error::parse(
                    location,
                    format!("frame {f} is truncated at channel {c} of {per_frame}"),
                ),
                other => other,
            })?);
        }
        frames.push(row);
    }
    Ok(BvhDocument { frames, ..doc_head })
}

fn parse_node(tk: &mut Tokens, name: String) -> Result<BvhNode> {
    tk.expect("{")?;
    tk.expect("OFFSET")?;
    let offset = [tk.number()?, tk.number()?, tk.number()?];
    let mut channels = Vec::new();

    // CHANNELS is optional (tip nodes have none)
    let mut node = BvhNode { name, offset, channels: Vec::new(), children: Vec::new(), end_site: None };
    loop {
        let (line, tok) = tk.next()?;
        match tok {
            "CHANNELS" => {
                let n = tk.integer()?;
                for _ in 0..n {
                    let (cline, ctok) = tk.next()?;
                    channels.push(Channel::parse(ctok, cline)?);
                }
            }
            "JOINT" => {
                let (_, child_name) = tk.next()?;
                let child = parse_node(tk, child_name.to_string())?;
                node.children.push(child);
            }
            "End" => {
                let (eline, etok) = tk.next()?;
                if etok != "Site" {
                    return Err(Error::parse(format!("line {eline}"), format!("expected 'Site', found '{etok}'")));
                }
                tk.expect("{")?;
                tk.expect("OFFSET")?;
                node.end_site = Some([tk.number()?, tk.number()?, tk.number()?]);
                tk.expect("}")?;
            }
            "}" => break,
            other => {
                return Err(Error::parse(format!("line {line}"), format!("unexpected token '{other}' in joint block")));
            }
        }
    }
    node.channels = channels;
    Ok(node)
}

pub fn read_bvh(path: &Path) -> Result<BvhDocument> {
    let text = std::fs::read_to_string(path)?;
    parse_bvh(&text)
}

// --- writing -----------------------------------------------------------------

pub fn format_bvh(doc: &BvhDocument) -> String {
    let mut out = String::new();
    out.push_str("HIERARCHY\n");
    write_node(&mut out, &doc.root, 0, true);
    out.push_str("MOTION\n");
    let _ = writeln!(out, "Frames: {}", doc.frames.len());
    let _ = writeln!(out, "Frame Time: {:.8}", doc.frame_time);
    for row in &doc.frames {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{v:.6}");
            first = false;
        }
        out.push('\n');
    }
    out
}

fn write_node(out: &mut String, node: &BvhNode, depth: usize, is_root: bool) {
    let ind = "  ".repeat(depth);
    let kind = if is_root { "ROOT" } else { "JOINT" };
    let _ = writeln!(out, "{ind}{kind} {}", node.name);
    let _ = writeln!(out, "{ind}{{");
    let _ = writeln!(
        out,
        "{ind}  OFFSET {:.6} {:.6} {:.6}",
        node.offset[0], node.offset[1], node.offset[2]
    );
    if !node.channels.is_empty() {
        let names: Vec<&str> = node.channels.iter().map(|c| c.name()).collect();
        let _ = writeln!(out, "{ind}  CHANNELS {} {}", node.channels.len(), names.join(" "));
    } else {
        let _ = writeln!(out, "{ind}  CHANNELS 0");
    }
    for child in &node.children {
        write_node(out, child, depth + 1, false);
    }
    if let Some(es) = node.end_site {
        let _ = writeln!(out, "{ind}  End Site");
        let _ = writeln!(out, "{ind}  {{");
        let _ = writeln!(out, "{ind}    OFFSET {:.6} {:.6} {:.6}", es[0], es[1], es[2]);
        let _ = writeln!(out, "{ind}  }}");
    }
    let _ = writeln!(out, "{ind}}}");
}

pub fn write_bvh(doc: &BvhDocument, path: &Path) -> Result<()> {
    std::fs::write(path, format_bvh(doc))?;
    Ok(())
}

// --- native FK -----------------------------------------------------------------

/// World positions of every named node and every end site (keyed
/// `"<parent>/End"`), using native BVH semantics: channels apply in listed
/// order after the node offset.
pub fn bvh_fk(doc: &BvhDocument) -> Result<HashMap<String, Array2<f64>>> {
    let t_len = doc.frames.len();
    let mut out: HashMap<String, Array2<f64>> = HashMap::new();
    fn walk(
        node: &BvhNode,
        frame: &[f64],
        cursor: &mut usize,
        parent_rot: &Mat3,
        parent_pos: &[f64; 3],
        t: usize,
        out: &mut HashMap<String, Array2<f64>>,
        t_len: usize,
    ) -> Result<()> {
        let mut pos = [
            parent_pos[0] + parent_rot[0][0] * node.offset[0] + parent_rot[0][1] * node.offset[1] + parent_rot[0][2] * node.offset[2],
            parent_pos[1] + parent_rot[1][0] * node.offset[0] + parent_rot[1][1] * node.offset[1] + parent_rot[1][2] * node.offset[2],
            parent_pos[2] + parent_rot[2][0] * node.offset[0] + parent_rot[2][1] * node.offset[1] + parent_rot[2][2] * node.offset[2],
        ];
        let mut rot = *parent_rot;
        for ch in &node.channels {
            let v = frame[*cursor];
            *cursor += 1;
            match ch {
                Channel::XPosition => {
                    let d = mat_vec(&rot, &[v, 0.0, 0.0]);
                    for k in 0..3 {
                        pos[k] += d[k];
                    }
                }
                Channel::YPosition => {
                    let d = mat_vec(&rot, &[0.0, v, 0.0]);
                    for k in 0..3 {
                        pos[k] += d[k];
                    }
                }
                Channel::ZPosition => {
                    let d = mat_vec(&rot, &[0.0, 0.0, v]);
                    for k in 0..3 {
                        pos[k] += d[k];
                    }
                }
                Channel::XRotation => {
                    let r = euler_to_matrix(&[v.to_radians(), 0.0, 0.0]);
                    rot = mat_mul(&rot, &r);
                }
                Channel::YRotation => {
                    let r = euler_to_matrix(&[0.0, v.to_radians(), 0.0]);
                    rot = mat_mul(&rot, &r);
                }
                Channel::ZRotation => {
                    let r = euler_to_matrix(&[0.0, 0.0, v.to_radians()]);
                    rot = mat_mul(&rot, &r);
                }
            }
        }
        let entry = out
            .entry(node.name.clone())
            .or_insert_with(|| Array2::zeros((t_len, 3)));
        for k in 0..3 {
            entry[[t, k]] = pos[k];
        }
        if let Some(es) = node.end_site {
            let d = mat_vec(&rot, &es);
            let entry = out
                .entry(format!("{}/End", node.name))
                .or_insert_with(|| Array2::zeros((t_len, 3)));
            for k in 0..3 {
                entry[[t, k]] = pos[k] + d[k];
            }
        }
        for child in &node.children {
            walk(child, frame, cursor, &rot, &pos, t, out, t_len)?;
        }
        Ok(())
    }

    let per_frame = doc.channel_count();
    for (t, frame) in doc.frames.iter().enumerate() {
        if frame.len() != per_frame {
            return Err(Error::Format(format!(
                "frame {t} has {} channel values, hierarchy declares {per_frame}",
                frame.len()
            )));
        }
        let mut cursor = 0usize;
        walk(&doc.root, frame, &mut cursor, &MAT3_IDENTITY, &[0.0; 3], t, &mut out, t_len)?;
    }
    Ok(out)
}

// --- canonical rig export / import ------------------------------------------------

fn tip_name(joint_idx: usize) -> String {
    format!("{}_tip", TOPOLOGY.joint_names[joint_idx])
}

fn children_of(j: usize) -> Vec<usize> {
    (0..JOINT_COUNT).filter(|&c| TOPOLOGY.parent[c] == Some(j)).collect()
}

fn build_rig_node(j: usize, tpose_offsets: &[[f64; 3]; JOINT_COUNT]) -> BvhNode {
    // rotation carrier at zero offset, bone offset on the tip
    let kids = children_of(j);
    let tip = if kids.is_empty() {
        None
    } else {
        Some(BvhNode {
            name: tip_name(j),
            offset: tpose_offsets[j],
            channels: vec![],
            children: kids.iter().map(|&c| build_rig_node(c, tpose_offsets)).collect(),
            end_site: None,
        })
    };
    BvhNode {
        name: TOPOLOGY.joint_names[j].to_string(),
        offset: [0.0; 3],
        channels: vec![Channel::ZRotation, Channel::YRotation, Channel::XRotation],
        children: tip.into_iter().collect(),
        end_site: if kids.is_empty() { Some(tpose_offsets[j]) } else { None },
    }
}

/// Converts a skeleton plus rotation and root trajectories into a BVH
/// document on the canonical rig.
pub fn export_bvh(
    skeleton: &Skeleton,
    rotations: &RotationSeq,
    root: &Array2<f64>,
    frame_time: f64,
) -> Result<BvhDocument> {
    if frame_time <= 0.0 {
        return Err(Error::Format(format!("frame time {frame_time} must be positive")));
    }
    let t_len = rotations.frames();
    if root.dim() != (t_len, 3) {
        return Err(Error::Shape(format!(
            "root trajectory {:?} does not match {t_len} rotation frames",
            root.dim()
        )));
    }
    let tpose = build_tpose(skeleton)?;
    let mut root_node = BvhNode {
        name: TOPOLOGY.joint_names[0].to_string(),
        offset: [0.0; 3],
        channels: vec![
            Channel::XPosition,
            Channel::YPosition,
            Channel::ZPosition,
            Channel::ZRotation,
            Channel::YRotation,
            Channel::XRotation,
        ],
        children: vec![],
        end_site: None,
    };
    for c in children_of(0) {
        root_node.children.push(build_rig_node(c, &tpose.offsets));
    }

    let mut frames = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut row = Vec::with_capacity(6 + 3 * (JOINT_COUNT - 1));
        row.push(root[[t, 0]]);
        row.push(root[[t, 1]]);
        row.push(root[[t, 2]]);
        // depth-first over the rig matches joint-index order only at the
        // root's own channels; walk the hierarchy explicitly for the rest
        fn push_rotations(
            node_joint: usize,
            rotations: &RotationSeq,
            t: usize,
            row: &mut Vec<f64>,
        ) -> Result<()> {
            let e = quat_to_euler(&rotations.quat(t, node_joint)?)?;
            row.push(e[2].to_degrees());
            row.push(e[1].to_degrees());
            row.push(e[0].to_degrees());
            for c in children_of(node_joint) {
                push_rotations(c, rotations, t, row)?;
            }
            Ok(())
        }
        let e = quat_to_euler(&rotations.quat(t, 0)?)?;
        row.push(e[2].to_degrees());
        row.push(e[1].to_degrees());
        row.push(e[0].to_degrees());
        for c in children_of(0) {
            push_rotations(c, rotations, t, &mut row)?;
        }
        frames.push(row);
    }
    Ok(BvhDocument { root: root_node, frame_time, frames })
}

/// Common aliases accepted when mapping BVH joint names onto the canonical
/// topology.
fn canonical_joint(name: &str) -> Option<usize> {
    if let Some(idx) = TOPOLOGY.joint_index(name) {
        return Some(idx);
    }
    let alias = match name {
        "Hips" | "hips" => "pelvis",
        "Spine" => "spine",
        "Spine1" | "Chest" => "thorax",
        "Neck" => "neck",
        "Head" => "head",
        "LeftShoulder" | "LeftArm" => "left_shoulder",
        "LeftForeArm" | "LeftElbow" => "left_elbow",
        "LeftHand" | "LeftWrist" => "left_wrist",
        "RightShoulder" | "RightArm" => "right_shoulder",
        "RightForeArm" | "RightElbow" => "right_elbow",
        "RightHand" | "RightWrist" => "right_wrist",
        "LeftUpLeg" | "LeftHip" => "left_hip",
        "LeftLeg" | "LeftKnee" => "left_knee",
        "LeftFoot" | "LeftAnkle" => "left_foot",
        "RightUpLeg" | "RightHip" => "right_hip",
        "RightLeg" | "RightKnee" => "right_knee",
        "RightFoot" | "RightAnkle" => "right_foot",
        _ => return None,
    };
    TOPOLOGY.joint_index(alias)
}

struct RigIndex<'a> {
    rotation_nodes: Vec<Option<&'a BvhNode>>,
    bone_offsets: Vec<[f64; 3]>,
}

fn index_rig(doc: &BvhDocument) -> Result<RigIndex<'_>> {
    let mut rotation_nodes: Vec<Option<&BvhNode>> = vec![None; JOINT_COUNT];
    fn visit<'a>(node: &'a BvhNode, nodes: &mut Vec<Option<&'a BvhNode>>) -> Result<()> {
        if !node.channels.is_empty() || node.end_site.is_some() || !node.name.ends_with("_tip") {
            if let Some(j) = canonical_joint(&node.name) {
                if nodes[j].is_some() {
                    return Err(Error::Ingestion(format!("duplicate joint '{}'", node.name)));
                }
                nodes[j] = Some(node);
            } else if !node.name.ends_with("_tip") {
                return Err(Error::Ingestion(format!(
                    "BVH joint '{}' has no mapping onto the canonical topology",
                    node.name
                )));
            }
        }
        for c in &node.children {
            visit(c, nodes)?;
        }
        Ok(())
    }
    visit(&doc.root, &mut rotation_nodes)?;
    for (j, n) in rotation_nodes.iter().enumerate() {
        if n.is_none() {
            return Err(Error::Ingestion(format!(
                "joint '{}' is missing from the BVH hierarchy",
                TOPOLOGY.joint_names[j]
            )));
        }
    }

    // bone offset of joint j: its tip child's offset, or its end site
    let mut bone_offsets = vec![[0.0; 3]; JOINT_COUNT];
    for j in 1..JOINT_COUNT {
        let node = rotation_nodes[j].unwrap();
        let off = if let Some(es) = node.end_site {
            es
        } else if let Some(tip) = node.children.iter().find(|c| c.name == tip_name(j)) {
            tip.offset
        } else {
            return Err(Error::Ingestion(format!(
                "joint '{}' has neither a tip node nor an end site",
                TOPOLOGY.joint_names[j]
            )));
        };
        bone_offsets[j] = off;
    }
    Ok(RigIndex { rotation_nodes, bone_offsets })
}

/// Reads a canonical-rig BVH document back into skeleton, rotations and root
/// trajectory. Bones must lie along the canonical rest directions and
/// mirrored bones must agree in length.
pub fn motion_from_bvh(doc: &BvhDocument) -> Result<(Skeleton, RotationSeq, Array2<f64>)> {
    let rig = index_rig(doc)?;

    let mut group_lengths = [0.0f64; GROUP_COUNT];
    let mut group_counts = [0usize; GROUP_COUNT];
    for j in 1..JOINT_COUNT {
        let off = rig.bone_offsets[j];
        let len = (off[0] * off[0] + off[1] * off[1] + off[2] * off[2]).sqrt();
        if len <= 0.0 {
            return Err(Error::Ingestion(format!(
                "bone at '{}' has zero length",
                TOPOLOGY.joint_names[j]
            )));
        }
        let dir = [off[0] / len, off[1] / len, off[2] / len];
        let want = REST_DIRECTIONS[j];
        let dev = (dir[0] - want[0]).abs() + (dir[1] - want[1]).abs() + (dir[2] - want[2]).abs();
        if dev > 1e-4 {
            return Err(Error::Ingestion(format!(
                "bone at '{}' points along {dir:?}, expected the canonical rest direction {want:?}",
                TOPOLOGY.joint_names[j]
            )));
        }
        group_lengths[TOPOLOGY.bone_group(j)] += len;
        group_counts[TOPOLOGY.bone_group(j)] += 1;
    }
    let mut lengths = [0.0; GROUP_COUNT];
    for g in 0..GROUP_COUNT {
        lengths[g] = group_lengths[g] / group_counts[g] as f64;
    }
    // asymmetry check against the group means
    for j in 1..JOINT_COUNT {
        let off = rig.bone_offsets[j];
        let len = (off[0] * off[0] + off[1] * off[1] + off[2] * off[2]).sqrt();
        let mean = lengths[TOPOLOGY.bone_group(j)];
        if (len - mean).abs() / mean > 1e-4 {
            return Err(Error::Ingestion(format!(
                "bone at '{}' has length {len} but its symmetry group averages {mean}; \
                 asymmetric rigs are not supported",
                TOPOLOGY.joint_names[j]
            )));
        }
    }
    let skeleton = Skeleton::new(lengths)?;

    // locate each joint's channel start within a frame row
    let mut channel_start: HashMap<*const BvhNode, usize> = HashMap::new();
    fn assign(node: &BvhNode, cursor: &mut usize, map: &mut HashMap<*const BvhNode, usize>) {
        map.insert(node as *const BvhNode, *cursor);
        *cursor += node.channels.len();
        for c in &node.children {
            assign(c, cursor, map);
        }
    }
    let mut cursor = 0;
    assign(&doc.root, &mut cursor, &mut channel_start);

    let t_len = doc.frames.len();
    let mut rot_values = Array3::zeros((t_len, JOINT_COUNT, 4));
    let mut root = Array2::zeros((t_len, 3));
    for (t, frame) in doc.frames.iter().enumerate() {
        if frame.len() != cursor {
            return Err(Error::Format(format!(
                "frame {t} has {} channel values, hierarchy declares {cursor}",
                frame.len()
            )));
        }
        for j in 0..JOINT_COUNT {
            let node = rig.rotation_nodes[j].unwrap();
            let start = channel_start[&(node as *const BvhNode)];
            let mut angles = [0.0f64; 3]; // x, y, z in radians
            let mut pos_seen = 0;
            for (k, ch) in node.channels.iter().enumerate() {
                let v = frame[start + k];
                match ch {
                    Channel::XPosition => {
                        root[[t, 0]] = v;
                        pos_seen += 1;
                    }
                    Channel::YPosition => {
                        root[[t, 1]] = v;
                        pos_seen += 1;
                    }
                    Channel::ZPosition => {
                        root[[t, 2]] = v;
                        pos_seen += 1;
                    }
                    Channel::XRotation => angles[0] = v.to_radians(),
                    Channel::YRotation => angles[1] = v.to_radians(),
                    Channel::ZRotation => angles[2] = v.to_radians(),
                }
            }
            if j == 0 && pos_seen != 3 {
                return Err(Error::Ingestion("root must carry three position channels".into()));
            }
            // ZYX channel order composes exactly as the intrinsic euler triple
            let q = crate::rotation::euler_to_quat(&angles);
            let q = crate::rotation::quat_normalize(&q)?;
            for (k, &v) in q.iter().enumerate() {
                rot_values[[t, j, k]] = v;
            }
        }
    }
    let rotations = RotationSeq::new(Representation::Quaternion, rot_values)?;
    Ok((skeleton, rotations, root))
}

/// Canonical joint positions under native BVH FK: the pelvis node itself plus
/// each joint's tip node or end site.
pub fn canonical_positions_from_bvh(doc: &BvhDocument) -> Result<Array3<f64>> {
    let fk = bvh_fk(doc)?;
    let t_len = doc.frames.len();
    let mut out = Array3::zeros((t_len, JOINT_COUNT, 3));
    for j in 0..JOINT_COUNT {
        let key = if j == 0 {
            TOPOLOGY.joint_names[0].to_string()
        } else {
            let tip = tip_name(j);
            if fk.contains_key(&tip) {
                tip
            } else {
                format!("{}/End", TOPOLOGY.joint_names[j])
            }
        };
        let pos = fk.get(&key).ok_or_else(|| {
            Error::Ingestion(format!("no FK position for joint '{}'", TOPOLOGY.joint_names[j]))
        })?;
        for t in 0..t_len {
            for k in 0..3 {
                out[[t, j, k]] = pos[[t, k]];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fk::fk_global;
    use crate::testutil::{random_rotation_seq, random_skeleton};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    #[test]
    fn identity_export_writes_zero_motion_rows() {
        let sk = Skeleton::new([0.5; 9]).unwrap();
        let rots = RotationSeq::identity(Representation::Quaternion, 3);
        let root = Array2::zeros((3, 3));
        let doc = export_bvh(&sk, &rots, &root, 1.0 / 30.0).unwrap();
        for row in &doc.frames {
            assert!(row.iter().all(|&v| v.abs() < 1e-12));
        }
        assert_eq!(doc.channel_count(), 6 + 16 * 3);
    }

    #[test]
    fn text_round_trip_preserves_structure_and_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sk = random_skeleton(&mut rng);
        let rots = random_rotation_seq(8, &mut rng);
        let mut root = Array2::zeros((8, 3));
        for v in root.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let doc = export_bvh(&sk, &rots, &root, 1.0 / 30.0).unwrap();
        let text = format_bvh(&doc);
        let parsed = parse_bvh(&text).unwrap();
        assert_eq!(parsed.channel_count(), doc.channel_count());
        assert_eq!(parsed.frame_count(), doc.frame_count());
        assert_abs_diff_eq!(parsed.frame_time, doc.frame_time, epsilon = 1e-7);
        for (a, b) in parsed.frames.iter().zip(doc.frames.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn native_fk_of_export_matches_canonical_fk() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..3 {
            let sk = random_skeleton(&mut rng);
            let rots = random_rotation_seq(5, &mut rng);
            let mut root = Array2::zeros((5, 3));
            for v in root.iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
            let expect = fk_global(&build_tpose(&sk).unwrap(), &rots, &root).unwrap();

            let doc = export_bvh(&sk, &rots, &root, 1.0 / 30.0).unwrap();
            let text = format_bvh(&doc);
            let parsed = parse_bvh(&text).unwrap();
            let got = canonical_positions_from_bvh(&parsed).unwrap();
            let max_dev = expect
                .iter()
                .zip(got.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_dev < 1e-3, "BVH FK deviates from canonical FK by {max_dev}");
        }
    }

    #[test]
    fn motion_from_bvh_recovers_skeleton_rotations_and_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let sk = random_skeleton(&mut rng);
        let rots = random_rotation_seq(6, &mut rng);
        let mut root = Array2::zeros((6, 3));
        for v in root.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let doc = export_bvh(&sk, &rots, &root, 1.0 / 30.0).unwrap();
        let parsed = parse_bvh(&format_bvh(&doc)).unwrap();
        let (sk2, rots2, root2) = motion_from_bvh(&parsed).unwrap();
        for g in 0..GROUP_COUNT {
            assert_abs_diff_eq!(sk2.lengths[g], sk.lengths[g], epsilon = 1e-5);
        }
        for (a, b) in root2.iter().zip(root.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-5);
        }
        // rotations agree as rotations (compare via FK)
        let p1 = fk_global(&build_tpose(&sk).unwrap(), &rots, &root).unwrap();
        let p2 = fk_global(&build_tpose(&sk2).unwrap(), &rots2, &root2).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-4);
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let sk = Skeleton::new([0.5; 9]).unwrap();
        let rots = RotationSeq::identity(Representation::Quaternion, 3);
        let root = Array2::zeros((3, 3));
        let doc = export_bvh(&sk, &rots, &root, 1.0 / 30.0).unwrap();
        let text = format_bvh(&doc);
        let cut = &text[..text.len() - 40];
        assert!(matches!(parse_bvh(cut), Err(Error::Parse { .. })));
    }

    #[test]
    fn unknown_joint_name_is_an_ingestion_error() {
        let sk = Skeleton::new([0.5; 9]).unwrap();
        let rots = RotationSeq::identity(Representation::Quaternion, 2);
        let root = Array2::zeros((2, 3));
        let doc = export_bvh(&sk, &rots, &root, 1.0 / 30.0).unwrap();
        let text = format_bvh(&doc).replace("JOINT spine\n", "JOINT vertebra\n");
        let parsed = parse_bvh(&text).unwrap();
        let err = motion_from_bvh(&parsed).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("vertebra") || msg.contains("spine"), "unhelpful error: {msg}");
    }
}
