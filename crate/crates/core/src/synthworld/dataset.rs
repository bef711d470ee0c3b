use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use super::scene::{generate_scene, Scene};
use super::SynthError;
use crate::matching::Target;
use crate::prompts::{crop_template, TemplateImage, DEFAULT_TEMPLATE_SIZE};
use crate::rng::{stream_rng, DetRng};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Object instances per class as `(scene, annotation)` indices.
    pub fn instances(&self) -> BTreeMap<usize, Vec<(usize, usize)>> {
        let mut map: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (si, s) in self.scenes.iter().enumerate() {
            for (ai, a) in s.annotations.iter().enumerate() {
                map.entry(a.class).or_default().push((si, ai));
            }
        }
        map
    }
}

/// `n` scenes over `pool`; scene `i` comes from its own stream, so any
/// prefix or subrange can be regenerated independently.
pub fn generate_dataset(seed: u64, split: &str, n: usize, pool: &[usize]) -> Result<Dataset, SynthError> {
    let component = format!("synthworld.scene.{split}");
    let scenes = (0..n)
        .map(|i| generate_scene(&mut stream_rng(seed, &component, i as u64), pool))
        .collect::<Result<_, _>>()?;
    Ok(Dataset { scenes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub target_index: usize,
    pub target: Scene,
    /// Dataset class id of each episode class.
    pub classes: Vec<usize>,
    /// `k` templates per episode class, cropped from other scenes.
    pub templates: Vec<Vec<TemplateImage>>,
    /// Ground truth labelled with episode-class indices.
    pub targets: Vec<Target>,
}

impl Episode {
    pub fn m(&self) -> usize {
        self.classes.len()
    }

    pub fn k(&self) -> usize {
        self.templates.first().map_or(0, Vec::len)
    }

    /// Templates flattened class-major with the episode class of each row.
    pub fn flat_templates(&self) -> (Vec<TemplateImage>, Vec<usize>) {
        let mut t = Vec::new();
        let mut rows = Vec::new();
        for (c, list) in self.templates.iter().enumerate() {
            t.extend(list.iter().cloned());
            rows.extend(std::iter::repeat_n(c, list.len()));
        }
        (t, rows)
    }

    pub fn present(&self, class_index: usize) -> bool {
        self.targets.iter().any(|t| t.class == class_index)
    }
}

/// Draws few-shot episodes from one dataset restricted to a class pool.
#[derive(Debug, Clone)]
pub struct EpisodeSampler<'a> {
    dataset: &'a Dataset,
    pool: Vec<usize>,
    forbidden: Vec<usize>,
    instances: BTreeMap<usize, Vec<(usize, usize)>>,
    scene_classes: Vec<Vec<usize>>,
    pub template_size: usize,
    pub jitter: bool,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(dataset: &'a Dataset, pool: &[usize]) -> Result<Self, SynthError> {
        if pool.is_empty() {
            return Err(SynthError::Input("empty class pool".into()));
        }
        let instances = dataset.instances();
        let scene_classes = dataset
            .scenes
            .iter()
            .map(|s| s.classes().into_iter().filter(|c| pool.contains(c)).collect())
            .collect();
        Ok(Self {
            dataset,
            pool: pool.to_vec(),
            forbidden: Vec::new(),
            instances,
            scene_classes,
            template_size: DEFAULT_TEMPLATE_SIZE,
            jitter: false,
        })
    }

    /// Refuse to ever emit an episode containing one of `classes`.
    pub fn forbid(mut self, classes: &[usize]) -> Result<Self, SynthError> {
        if let Some(c) = self.pool.iter().find(|c| classes.contains(c)) {
            return Err(SynthError::Contamination(format!("class {c} is both sampled and forbidden")));
        }
        self.forbidden = classes.to_vec();
        Ok(self)
    }

    fn donors(&self, class: usize, target: usize) -> Vec<(usize, usize)> {
        self.instances
            .get(&class)
            .map(|v| v.iter().copied().filter(|&(s, _)| s != target).collect())
            .unwrap_or_default()
    }

    /// One episode with `m` classes and `k` shots each.
    ///
    /// Without `include_absent` the target holds at least one instance of
    /// every episode class. With it, between 1 and `m` classes are present and
    /// the rest are absent pool classes whose correct output is pure ∅.
    pub fn sample(&self, m: usize, k: usize, include_absent: bool, rng: &mut DetRng) -> Result<Episode, SynthError> {
        if m == 0 || k == 0 {
            return Err(SynthError::Input("m and k must be positive".into()));
        }
        let need = if include_absent { 1 } else { m };
        let candidates: Vec<usize> = (0..self.dataset.len())
            .filter(|&i| self.scene_classes[i].len() >= need)
            .collect();
        if candidates.is_empty() {
            return Err(SynthError::Sampling(format!("no scene holds {need} distinct pool classes")));
        }
        // A few retries cover targets whose classes lack donors.
        for _ in 0..64 {
            let ti = candidates[rng.random_range(0..candidates.len())];
            if let Some(ep) = self.try_target(ti, m, k, include_absent, rng)? {
                return Ok(ep);
            }
        }
        Err(SynthError::Sampling(format!("could not find {k} donor instances for {m} classes")))
    }

    fn try_target(
        &self,
        ti: usize,
        m: usize,
        k: usize,
        include_absent: bool,
        rng: &mut DetRng,
    ) -> Result<Option<Episode>, SynthError> {
        let present: Vec<usize> = self.scene_classes[ti]
            .iter()
            .copied()
            .filter(|&c| self.donors(c, ti).len() >= k)
            .collect();
        let mut classes: Vec<usize> = if include_absent {
            if present.is_empty() {
                return Ok(None);
            }
            let n_present = rng.random_range(1..=m.min(present.len()));
            let absent: Vec<usize> = self
                .pool
                .iter()
                .copied()
                .filter(|c| !self.scene_classes[ti].contains(c) && self.donors(*c, ti).len() >= k)
                .collect();
            if absent.len() < m - n_present {
                return Ok(None);
            }
            let mut chosen: Vec<usize> = sample(rng, present.len(), n_present).into_iter().map(|i| present[i]).collect();
            chosen.extend(sample(rng, absent.len(), m - n_present).into_iter().map(|i| absent[i]));
            chosen
        } else {
            if present.len() < m {
                return Ok(None);
            }
            sample(rng, present.len(), m).into_iter().map(|i| present[i]).collect()
        };
        classes.shuffle(rng);
        if let Some(c) = classes.iter().find(|c| self.forbidden.contains(c)) {
            return Err(SynthError::Contamination(format!("forbidden class {c} sampled")));
        }

        let mut templates = Vec::with_capacity(m);
        for &c in &classes {
            let donors = self.donors(c, ti);
            let mut shots = Vec::with_capacity(k);
            for j in sample(rng, donors.len(), k) {
                let (si, ai) = donors[j];
                let scene = &self.dataset.scenes[si];
                let mut t = crop_template(
                    &scene.image,
                    scene.annotations[ai].bbox.to_xyxy(),
                    self.template_size,
                    rng,
                    self.jitter,
                )
                .map_err(|e| SynthError::Input(e.to_string()))?;
                t.source_class = Some(c);
                shots.push(t);
            }
            templates.push(shots);
        }
        let target = self.dataset.scenes[ti].clone();
        let targets = target
            .annotations
            .iter()
            .filter_map(|a| {
                classes.iter().position(|&c| c == a.class).map(|class| Target { class, bbox: a.bbox })
            })
            .collect();
        Ok(Some(Episode {
            target_index: ti,
            target,
            classes,
            templates,
            targets,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;
    use crate::synthworld::classes::ClassSplit;

    fn fixture() -> (Dataset, ClassSplit) {
        let split = ClassSplit::default();
        (generate_dataset(7, "fixture", 120, &split.all()).unwrap(), split)
    }

    #[test]
    fn dataset_regenerates_identically() {
        let (a, split) = fixture();
        let b = generate_dataset(7, "fixture", 10, &split.all()).unwrap();
        assert_eq!(&a.scenes[..10], &b.scenes[..]);
    }

    #[test]
    fn present_only_episodes_cover_every_class() {
        let (ds, split) = fixture();
        let sampler = EpisodeSampler::new(&ds, &split.all()).unwrap();
        let mut rng = component_rng(1, "ep");
        for _ in 0..50 {
            let ep = sampler.sample(2, 3, false, &mut rng).unwrap();
            assert_eq!(ep.m(), 2);
            assert!(ep.templates.iter().all(|t| t.len() == 3));
            for c in 0..ep.m() {
                assert!(ep.present(c));
            }
        }
    }

    #[test]
    fn templates_come_from_other_scenes_with_matching_class() {
        let (ds, split) = fixture();
        let sampler = EpisodeSampler::new(&ds, &split.base).unwrap();
        let mut rng = component_rng(2, "ep");
        for _ in 0..50 {
            let ep = sampler.sample(3, 2, true, &mut rng).unwrap();
            assert_eq!(ep.target, ds.scenes[ep.target_index]);
            for (c, list) in ep.templates.iter().enumerate() {
                assert!(list.iter().all(|t| t.source_class == Some(ep.classes[c])));
            }
            assert!(ep.classes.iter().all(|c| split.base.contains(c)));
            let expected = ep.target.annotations.iter().filter(|a| ep.classes.contains(&a.class)).count();
            assert_eq!(ep.targets.len(), expected);
            assert!((0..ep.m()).any(|c| ep.present(c)));
        }
    }

    #[test]
    fn absent_classes_occur_when_allowed() {
        let (ds, split) = fixture();
        let sampler = EpisodeSampler::new(&ds, &split.all()).unwrap();
        let mut rng = component_rng(3, "ep");
        let absent = (0..100)
            .map(|_| sampler.sample(3, 1, true, &mut rng).unwrap())
            .filter(|ep| (0..ep.m()).any(|c| !ep.present(c)))
            .count();
        assert!(absent > 0);
    }

    #[test]
    fn insufficient_instances_is_sampling_error() {
        let (ds, split) = fixture();
        let sampler = EpisodeSampler::new(&ds, &split.all()).unwrap();
        let mut rng = component_rng(4, "ep");
        assert!(matches!(sampler.sample(1, 10_000, false, &mut rng), Err(SynthError::Sampling(_))));
        assert!(matches!(sampler.sample(6, 1, false, &mut rng), Err(SynthError::Sampling(_))));
    }

    #[test]
    fn forbidding_pool_classes_is_rejected() {
        let (ds, split) = fixture();
        let sampler = EpisodeSampler::new(&ds, &split.all()).unwrap();
        assert!(matches!(sampler.forbid(&split.novel), Err(SynthError::Contamination(_))));
        let base = EpisodeSampler::new(&ds, &split.base).unwrap().forbid(&split.novel).unwrap();
        let ep = base.sample(2, 1, true, &mut component_rng(5, "ep")).unwrap();
        assert!(ep.classes.iter().all(|c| !split.novel.contains(c)));
    }

    #[test]
    fn flat_templates_are_class_major() {
        let (ds, split) = fixture();
        let sampler = EpisodeSampler::new(&ds, &split.all()).unwrap();
        let ep = sampler.sample(2, 3, false, &mut component_rng(6, "ep")).unwrap();
        let (t, rows) = ep.flat_templates();
        assert_eq!(t.len(), 6);
        assert_eq!(rows, vec![0, 0, 0, 1, 1, 1]);
    }
}
