//! Graph-based navigation map: objects, append-only groups, and the
//! bit-exact text rendering used as planner context.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ObjectId = u64;
pub type GroupId = u64;

pub const DEFAULT_DEDUP_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: ObjectId,
    pub label: String,
    pub position: [i32; 3],
    pub discovered_step: u32,
    pub visited: bool,
}

/// An append-only cluster of objects. Member order never changes so the
/// group's rendered text (and therefore its cached KV prefix) only ever
/// grows at the end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectGroup {
    pub group_id: GroupId,
    pub members: Vec<ObjectId>,
    pub created_step: u32,
}

/// Where the clusterer wants a staged object to go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assignment {
    ExistingGroup(GroupId),
    NewGroup,
}

/// Result of applying one step's assignments.
#[derive(Debug, Clone, Default)]
pub struct AppliedAssignments {
    /// Existing groups that gained members, in group order.
    pub extended: Vec<GroupId>,
    /// The step's single new group, if any object needed one.
    pub new_group: Option<GroupId>,
}

#[derive(Debug, Clone)]
pub struct NavigationMap {
    objects: BTreeMap<ObjectId, ObjectEntry>,
    groups: Vec<ObjectGroup>,
    trajectory: Vec<ObjectId>,
    staged: Vec<ObjectId>,
    next_object_id: ObjectId,
    next_group_id: GroupId,
    max_step: u32,
    dedup_radius: f64,
}

impl Default for NavigationMap {
    fn default() -> Self {
        Self::new(DEFAULT_DEDUP_RADIUS)
    }
}

impl NavigationMap {
    pub fn new(dedup_radius: f64) -> Self {
        NavigationMap {
            objects: BTreeMap::new(),
            groups: Vec::new(),
            trajectory: Vec::new(),
            staged: Vec::new(),
            next_object_id: 1,
            next_group_id: 1,
            max_step: 0,
            dedup_radius,
        }
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectEntry> {
        self.objects.values()
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    pub fn object(&self, id: ObjectId) -> Result<&ObjectEntry> {
        self.objects.get(&id).ok_or(Error::UnknownObject(id))
    }

    pub fn groups(&self) -> &[ObjectGroup] {
        &self.groups
    }

    pub fn group(&self, group_id: GroupId) -> Result<&ObjectGroup> {
        self.groups
            .iter()
            .find(|g| g.group_id == group_id)
            .ok_or(Error::UnknownGroup(group_id))
    }

    /// 1-based position of the group in the map's group list; group
    /// numbering in renderings is positional, so it is stable under the
    /// append-only discipline.
    pub fn group_number(&self, group_id: GroupId) -> Result<usize> {
        self.groups
            .iter()
            .position(|g| g.group_id == group_id)
            .map(|p| p + 1)
            .ok_or(Error::UnknownGroup(group_id))
    }

    /// Objects detected but not yet placed in a group, in detection order.
    pub fn staged(&self) -> &[ObjectId] {
        &self.staged
    }

    pub fn trajectory(&self) -> &[ObjectId] {
        &self.trajectory
    }

    pub fn max_step(&self) -> u32 {
        self.max_step
    }

    /// Insert this step's detections. A detection matching an existing
    /// object (same label, Euclidean distance within the dedup radius)
    /// is silently dropped; the rest become staged objects. Returns the
    /// new ids in input order.
    pub fn add_detections(
        &mut self,
        step: u32,
        detections: &[(String, [i32; 3])],
    ) -> Vec<ObjectId> {
        assert!(step >= self.max_step, "navigation steps must not go backwards");
        self.max_step = step;
        let mut added = Vec::new();
        for (label, position) in detections {
            assert!(
                position.iter().all(|&c| c >= 0),
                "object positions are non-negative grid coordinates"
            );
            if self.is_duplicate(label, *position) {
                continue;
            }
            let id = self.next_object_id;
            self.next_object_id += 1;
            self.objects.insert(
                id,
                ObjectEntry {
                    id,
                    label: label.clone(),
                    position: *position,
                    discovered_step: step,
                    visited: false,
                },
            );
            self.staged.push(id);
            added.push(id);
        }
        added
    }

    fn is_duplicate(&self, label: &str, position: [i32; 3]) -> bool {
        self.objects.values().any(|o| {
            o.label == label && euclidean(o.position, position) <= self.dedup_radius
        })
    }

    /// Place staged objects per the clusterer's decisions. Every
    /// `NewGroup` target lands in one shared new group, preserving
    /// detection order. Assignments must cover staged objects only.
    pub fn apply_assignments(
        &mut self,
        step: u32,
        assignments: &[(ObjectId, Assignment)],
    ) -> Result<AppliedAssignments> {
        let mut applied = AppliedAssignments::default();
        let mut new_members: Vec<ObjectId> = Vec::new();
        for (id, target) in assignments {
            let staged_at = self
                .staged
                .iter()
                .position(|s| s == id)
                .ok_or(Error::UnknownObject(*id))?;
            self.staged.remove(staged_at);
            match target {
                Assignment::ExistingGroup(gid) => {
                    let group = self
                        .groups
                        .iter_mut()
                        .find(|g| g.group_id == *gid)
                        .ok_or(Error::UnknownGroup(*gid))?;
                    group.members.push(*id);
                    if !applied.extended.contains(gid) {
                        applied.extended.push(*gid);
                    }
                }
                Assignment::NewGroup => new_members.push(*id),
            }
        }
        if !new_members.is_empty() {
            let gid = self.next_group_id;
            self.next_group_id += 1;
            self.groups.push(ObjectGroup {
                group_id: gid,
                members: new_members,
                created_step: step,
            });
            applied.new_group = Some(gid);
        }
        Ok(applied)
    }

    /// `{object: <label>, position:(<x>,<y>,<z>)}`
    pub fn render_member(&self, id: ObjectId) -> Result<String> {
        let o = self.object(id)?;
        Ok(format!(
            "{{object: {}, position:({},{},{})}}",
            o.label, o.position[0], o.position[1], o.position[2]
        ))
    }

    /// `Object Group <k>: {object: ..}, {object: ..}` with members in
    /// append order and `<k>` the group's 1-based list position.
    pub fn render_group(&self, group_id: GroupId) -> Result<String> {
        let number = self.group_number(group_id)?;
        let group = self.group(group_id)?;
        let mut out = format!("Object Group {number}: ");
        for (i, member) in group.members.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(&self.render_member(*member)?);
        }
        Ok(out)
    }

    /// Full planning prompt: the selected groups in map order, the fixed
    /// instruction block naming the goal, then the trajectory block
    /// (omitted when nothing has been visited).
    pub fn render_prompt(
        &self,
        selected: &[GroupId],
        goal: &str,
        trajectory: &[ObjectId],
    ) -> Result<String> {
        let mut out = String::new();
        let mut ordered: Vec<GroupId> = Vec::new();
        for g in &self.groups {
            if selected.contains(&g.group_id) {
                ordered.push(g.group_id);
            }
        }
        for gid in selected {
            if !ordered.contains(gid) {
                return Err(Error::UnknownGroup(*gid));
            }
        }
        for gid in ordered {
            out.push_str(&self.render_group(gid)?);
            out.push_str("\n\n");
        }
        out.push_str(&instruction_block(goal));
        if !trajectory.is_empty() {
            out.push_str("\n\nTrajectory: You have visited ");
            for (i, id) in trajectory.iter().enumerate() {
                if i > 0 {
                    out.push_str(" and ");
                }
                let o = self.object(*id)?;
                out.push_str(&format!(
                    "the {} at position ({},{},{})",
                    o.label, o.position[0], o.position[1], o.position[2]
                ));
            }
            out.push('.');
        }
        Ok(out)
    }

    /// The unvisited object whose label equals `goal_label`
    /// (case-insensitive); ties break to the lowest id.
    pub fn find_goal(&self, goal_label: &str) -> Option<ObjectId> {
        self.objects
            .values()
            .find(|o| !o.visited && o.label.eq_ignore_ascii_case(goal_label))
            .map(|o| o.id)
    }

    /// Record an arrival: flips visited (false -> true only) and appends
    /// to the trajectory.
    pub fn mark_visited(&mut self, id: ObjectId) -> Result<()> {
        let o = self.objects.get_mut(&id).ok_or(Error::UnknownObject(id))?;
        if !o.visited {
            o.visited = true;
            self.trajectory.push(id);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> MapSnapshot {
        MapSnapshot {
            objects: self
                .objects
                .values()
                .map(|o| SnapshotObject {
                    id: o.id,
                    label: o.label.clone(),
                    position: o.position,
                    visited: o.visited,
                })
                .collect(),
            groups: self
                .groups
                .iter()
                .map(|g| SnapshotGroup {
                    id: g.group_id,
                    members: g.members.clone(),
                })
                .collect(),
            trajectory: self.trajectory.clone(),
        }
    }

    /// Structural invariants, asserted by tests after each step: groups
    /// partition the non-staged objects, and the trajectory references
    /// visited objects.
    pub fn check_invariants(&self) {
        let mut seen = std::collections::BTreeSet::new();
        for g in &self.groups {
            for m in &g.members {
                assert!(self.objects.contains_key(m), "group member {m} exists");
                assert!(seen.insert(*m), "object {m} in more than one group");
            }
        }
        for s in &self.staged {
            assert!(seen.insert(*s), "staged object {s} also grouped");
        }
        assert_eq!(seen.len(), self.objects.len(), "groups + staged cover objects");
        for t in &self.trajectory {
            assert!(self.objects[t].visited, "trajectory entry {t} visited");
        }
    }
}

fn instruction_block(goal: &str) -> String {
    format!(
        "Instruction: You are a navigation robot. The above is a description of \
different objects in the environment that you have seen. Your final goal is to \
find the {goal} in the environment. Based on the environmental information, \
please choose one specific object to travel to as your sub-goal, following such \
format: \"The next subgoal is xxx at position (xx, xx, xx)\". Here are the \
objects that you have traveled to before: "
    )
}

fn euclidean(a: [i32; 3], b: [i32; 3]) -> f64 {
    let dx = f64::from(a[0] - b[0]);
    let dy = f64::from(a[1] - b[1]);
    let dz = f64::from(a[2] - b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// JSON document shape used by episode logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapSnapshot {
    pub objects: Vec<SnapshotObject>,
    pub groups: Vec<SnapshotGroup>,
    pub trajectory: Vec<ObjectId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotObject {
    pub id: ObjectId,
    pub label: String,
    pub position: [i32; 3],
    pub visited: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotGroup {
    pub id: GroupId,
    pub members: Vec<ObjectId>,
}
