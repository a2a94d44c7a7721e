"""Built-in skeletons: random articulated chains/trees and a bilateral arm-and-hand model."""

import numpy as np

from .skeleton import Body, Joint, JointKind, ScaleGroup, Site, Skeleton

HINGE_LIMIT = 1.2
BALL_LIMIT = 0.8
SLIDE_LIMIT = 0.1


def _unit(v):
    v = np.asarray(v, float)
    return tuple(float(x) for x in v / np.linalg.norm(v))


def _vec(v):
    return tuple(float(x) for x in v)


def _random_offset(rng, lo, hi):
    d = rng.normal(size=3)
    return d / np.linalg.norm(d) * rng.uniform(lo, hi)


def random_skeleton(rng, n_dof, tree=False, kinds=("hinge", "ball", "slide"), scale_groups=True):
    """Random skeleton with a free root and ``n_dof`` articulated coordinates.

    Every non-root body carries two non-collinear sites, so each joint is
    observable from marker positions; the root carries three core sites.
    """
    bodies = [Body("root", None, (0.0, 0.0, 0.0), Joint(JointKind.FREE))]
    sites = [Site("root_a", "root", (0.12, 0.0, 0.0)),
             Site("root_b", "root", (0.0, 0.12, 0.0)),
             Site("root_c", "root", (0.0, 0.0, 0.12))]
    remaining = n_dof
    i = 0
    while remaining > 0:
        i += 1
        options = [k for k in kinds if JointKind(k).ndof <= remaining]
        kind = JointKind(options[rng.integers(len(options))])
        remaining -= kind.ndof
        parent = bodies[rng.integers(len(bodies))].name if tree else bodies[-1].name
        name = f"b{i}"
        t = _random_offset(rng, 0.15, 0.3)
        if kind is JointKind.HINGE:
            joint = Joint(kind, _unit(rng.normal(size=3)), (-HINGE_LIMIT,), (HINGE_LIMIT,))
        elif kind is JointKind.SLIDE:
            joint = Joint(kind, _unit(rng.normal(size=3)), (-SLIDE_LIMIT,), (SLIDE_LIMIT,))
        else:
            joint = Joint(kind, None, (-BALL_LIMIT,) * 3, (BALL_LIMIT,) * 3)
        bodies.append(Body(name, parent, _vec(t), joint))
        a = _random_offset(rng, 0.1, 0.2)
        b = np.cross(a, rng.normal(size=3))
        b = b / np.linalg.norm(b) * rng.uniform(0.05, 0.12) + 0.5 * a
        sites += [Site(f"{name}_a", name, _vec(a)), Site(f"{name}_b", name, _vec(b))]
    groups = ()
    if scale_groups:
        groups = tuple(ScaleGroup(f"g_{b.name}", (b.name,)) for b in bodies)
    return Skeleton(tuple(bodies), tuple(sites), groups, ("root_a", "root_b", "root_c"),
                    name=f"random_{'tree' if tree else 'chain'}_{n_dof}")


def hinge_chain(lengths, axis=(0.0, 0.0, 1.0), limits=(-np.pi, np.pi)):
    """Planar hinge chain along +x with a site at the end of every link."""
    bodies = [Body("root", None, (0.0, 0.0, 0.0), Joint(JointKind.FREE))]
    sites = [Site("root_site", "root", (0.0, 0.0, 0.0))]
    prev_len = 0.0
    for i, L in enumerate(lengths):
        name = f"link{i}"
        bodies.append(Body(name, bodies[-1].name, (prev_len, 0.0, 0.0),
                           Joint(JointKind.HINGE, tuple(axis), (limits[0],), (limits[1],))))
        sites.append(Site(f"tip{i}", name, (float(L), 0.0, 0.0)))
        prev_len = float(L)
    return Skeleton(tuple(bodies), tuple(sites), (), ("root_site",), name="hinge_chain")


FINGERS = {
    # name: (lateral offset toward the thumb side, MCP depth, phalanx lengths)
    "index": (0.022, 0.085, (0.040, 0.024, 0.020)),
    "middle": (0.003, 0.087, (0.044, 0.028, 0.021)),
    "ring": (-0.016, 0.083, (0.041, 0.026, 0.021)),
    "little": (-0.032, 0.078, (0.032, 0.019, 0.019)),
}
THUMB_LENGTHS = (0.045, 0.032, 0.027)

HAND_SITE_ORDER = ["wrist", "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip"] + [
    f"{f}_{j}" for f in FINGERS for j in ("mcp", "pip", "dip", "tip")]


def hand_site_names(side):
    return [f"{n}_{side}" for n in HAND_SITE_ORDER]


def two_hand_skeleton():
    """Torso with two arms and fully articulated hands (60 coordinates, 21 sites per hand).

    Frame convention: +z up, +x to the subject's right, +y forward. Arms hang
    along -z with palms facing forward, so finger flexion is a positive rotation
    about +x. Each hand carries the wrist, thumb CMC/MCP/IP, finger MCP/PIP/DIP
    joint centres and five fingertips.
    """
    hinge = JointKind.HINGE
    bodies = [Body("torso", None, (0.0, 0.0, 0.0), Joint(JointKind.FREE))]
    sites = [
        Site("pelvis_l", "torso", (-0.12, 0.0, 0.0)),
        Site("pelvis_r", "torso", (0.12, 0.0, 0.0)),
        Site("spine", "torso", (0.0, -0.1, 0.25)),
        Site("sternum", "torso", (0.0, 0.1, 0.4)),
        Site("c7", "torso", (0.0, -0.08, 0.52)),
        Site("shoulder_l", "torso", (-0.19, 0.0, 0.48)),
        Site("shoulder_r", "torso", (0.19, 0.0, 0.48)),
    ]
    core = [s.name for s in sites]
    groups = [ScaleGroup("torso", ("torso",))]
    for side, sx in (("l", -1.0), ("r", 1.0)):
        ua, fa, hd = f"upper_arm_{side}", f"forearm_{side}", f"hand_{side}"
        bodies.append(Body(ua, "torso", (sx * 0.19, 0.0, 0.48),
                           Joint(JointKind.BALL, None, (-1.2,) * 3, (1.2,) * 3)))
        bodies.append(Body(fa, ua, (0.0, 0.0, -0.30), Joint(hinge, (1.0, 0.0, 0.0), (0.0,), (2.3,))))
        bodies.append(Body(hd, fa, (0.0, 0.0, -0.26),
                           Joint(JointKind.BALL, None, (-1.0, -0.5, -1.2), (1.0, 0.5, 1.2))))
        sites += [
            Site(f"uarm_{side}", ua, (sx * 0.045, 0.0, -0.15)),
            Site(f"elbow_{side}", ua, (0.0, 0.0, -0.30)),
            Site(f"forearm_{side}", fa, (sx * 0.03, 0.0, -0.13)),
        ]
        core += [f"uarm_{side}", f"elbow_{side}", f"forearm_{side}"]
        hand_bodies = [hd]
        sites.append(Site(f"wrist_{side}", hd, (0.0, 0.0, 0.0)))

        # thumb: metacarpal points down, forward and toward the thumb side
        cmc = (sx * 0.022, 0.010, -0.020)
        m = np.array([sx * 0.5, 0.35, -0.8])
        m /= np.linalg.norm(m)
        a1 = np.array([0.0, 1.0, 0.0])
        a2 = np.cross(m, a1)
        a2 /= np.linalg.norm(a2)
        names = [f"thumb_cmc1_{side}", f"thumb_mc_{side}", f"thumb_prox_{side}", f"thumb_dist_{side}"]
        bodies.append(Body(names[0], hd, cmc, Joint(hinge, _unit(a1), (-0.5,), (0.5,))))
        bodies.append(Body(names[1], names[0], (0.0, 0.0, 0.0), Joint(hinge, _unit(a2), (-0.5,), (0.8,))))
        bodies.append(Body(names[2], names[1], _vec(m * THUMB_LENGTHS[0]),
                           Joint(hinge, _unit(a2), (-0.2,), (1.0,))))
        bodies.append(Body(names[3], names[2], _vec(m * THUMB_LENGTHS[1]),
                           Joint(hinge, _unit(a2), (-0.3,), (1.3,))))
        sites += [
            Site(f"thumb_cmc_{side}", hd, cmc),
            Site(f"thumb_mcp_{side}", names[2], (0.0, 0.0, 0.0)),
            Site(f"thumb_ip_{side}", names[3], (0.0, 0.0, 0.0)),
            Site(f"thumb_tip_{side}", names[3], _vec(m * THUMB_LENGTHS[2])),
        ]
        hand_bodies += names

        for f, (lat, depth, (l1, l2, l3)) in FINGERS.items():
            mcp = (sx * lat, 0.0, -depth)
            abd, prox, mid, dist = (f"{f}_{p}_{side}" for p in ("abd", "prox", "mid", "dist"))
            bodies += [
                Body(abd, hd, mcp, Joint(hinge, (0.0, 1.0, 0.0), (-0.35,), (0.35,))),
                Body(prox, abd, (0.0, 0.0, 0.0), Joint(hinge, (1.0, 0.0, 0.0), (-0.3,), (1.5,))),
                Body(mid, prox, (0.0, 0.0, -l1), Joint(hinge, (1.0, 0.0, 0.0), (0.0,), (1.8,))),
                Body(dist, mid, (0.0, 0.0, -l2), Joint(hinge, (1.0, 0.0, 0.0), (0.0,), (1.3,))),
            ]
            sites += [
                Site(f"{f}_mcp_{side}", hd, mcp),
                Site(f"{f}_pip_{side}", mid, (0.0, 0.0, 0.0)),
                Site(f"{f}_dip_{side}", dist, (0.0, 0.0, 0.0)),
                Site(f"{f}_tip_{side}", dist, (0.0, 0.0, -l3)),
            ]
            hand_bodies += [abd, prox, mid, dist]
        groups += [ScaleGroup(ua, (ua,)), ScaleGroup(fa, (fa,)), ScaleGroup(hd, tuple(hand_bodies))]

    # keep each hand's sites in the canonical order after the arm sites
    order = {n: i for i, n in enumerate(core + hand_site_names("l") + hand_site_names("r"))}
    sites.sort(key=lambda s: order[s.name])
    return Skeleton(tuple(bodies), tuple(sites), tuple(groups), tuple(core), name="two_hand")


def upper_extremity_sites(skel, side):
    return [f"shoulder_{side}", f"uarm_{side}", f"elbow_{side}", f"forearm_{side}"] + hand_site_names(side)


def hinge_coords(skel, bodies=None):
    """Names of hinge coordinates, optionally restricted to a set of bodies."""
    return [b.name for b in skel.bodies
            if b.joint.kind is JointKind.HINGE and (bodies is None or b.name in bodies)]


def hand_hinge_coords(skel):
    hand = set()
    for side in ("l", "r"):
        root = skel.body_index[f"hand_{side}"]
        hand |= {b.name for i, b in enumerate(skel.bodies) if root in skel.ancestors[i] and i != root}
    return hinge_coords(skel, hand)


FIXTURES = {
    "two_hand": two_hand_skeleton,
}


def make_fixture(name, seed=0):
    """Fixture by name: ``two_hand``, ``chain<N>`` or ``tree<N>`` (N articulated DOF)."""
    if name in FIXTURES:
        return FIXTURES[name]()
    for prefix, tree in (("chain", False), ("tree", True)):
        if name.startswith(prefix) and name[len(prefix):].isdigit():
            return random_skeleton(np.random.default_rng(seed), int(name[len(prefix):]), tree=tree)
    raise KeyError(f"unknown fixture {name!r}")
