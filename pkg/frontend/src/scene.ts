/** Client mirror of the decoded Gaussian stream: flat attribute arrays plus
 * the update rules for MOTION and KEYCORR payloads. The math mirrors the
 * server's decoder (raw influence-weighted sums, left-composed quaternion
 * increments, additive residuals) so a decoding client tracks the server's
 * per-frame scenes to float precision. */

import {
  MaskedResiduals,
  MotionField,
  Payload,
  ScenePlanes,
  TAG_INIT,
  TAG_KEYCORR,
  TAG_MOTION,
} from "./protocol.js";

const QUAT_DEGENERATE_NORM = 1e-8;

export class SceneBuffer {
  n: number;
  frame = -1;
  dirty = false;
  mu: Float32Array;
  q: Float32Array;
  logS: Float32Array;
  logitSigma: Float32Array;
  sh: Float32Array;

  constructor(n: number) {
    this.n = n;
    this.mu = new Float32Array(n * 3);
    this.q = new Float32Array(n * 4);
    this.logS = new Float32Array(n * 3);
    this.logitSigma = new Float32Array(n);
    this.sh = new Float32Array(n * 12);
  }

  setPlanes(planes: ScenePlanes, frame: number): void {
    if (planes.n !== this.n) {
      throw new Error(`scene has ${this.n} points, update carries ${planes.n}`);
    }
    this.mu.set(planes.mu);
    this.q.set(planes.q);
    this.logS.set(planes.logS);
    this.logitSigma.set(planes.logitSigma);
    this.sh.set(planes.sh);
    this.frame = frame;
    this.dirty = true;
  }

  /** Apply one decoded payload as frame `frameIndex`. */
  apply(payload: Payload, frameIndex: number): void {
    if (payload.tag === TAG_INIT) {
      this.setPlanes(payload.scene, frameIndex);
      return;
    }
    if (this.frame < 0) {
      throw new Error("scene update before initialization");
    }
    if (payload.tag === TAG_MOTION) {
      applyMotion(this, payload.motion);
    } else if (payload.tag === TAG_KEYCORR) {
      applyResiduals(this, payload.residuals);
    }
    this.frame = frameIndex;
    this.dirty = true;
  }
}

function rotmatFromQuat(q: ArrayLike<number>, off: number): number[] {
  let w = q[off], x = q[off + 1], y = q[off + 2], z = q[off + 3];
  const norm = Math.hypot(w, x, y, z);
  if (norm < 1e-12) {
    throw new Error("cannot normalize near-zero quaternion");
  }
  w /= norm; x /= norm; y /= norm; z /= norm;
  return [
    1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
    2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
    2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
  ];
}

/** Hamilton product (a composed on the left of b), then unit-normalize. */
function composeNormalized(
  a: [number, number, number, number],
  q: Float32Array,
  off: number,
): void {
  const [aw, ax, ay, az] = a;
  const bw = q[off], bx = q[off + 1], by = q[off + 2], bz = q[off + 3];
  const w = aw * bw - ax * bx - ay * by - az * bz;
  const x = aw * bx + ax * bw + ay * bz - az * by;
  const y = aw * by - ax * bz + ay * bw + az * bx;
  const z = aw * bz + ax * by - ay * bx + az * bw;
  const norm = Math.hypot(w, x, y, z);
  if (norm < 1e-12) {
    throw new Error("cannot normalize near-zero quaternion");
  }
  q[off] = w / norm;
  q[off + 1] = x / norm;
  q[off + 2] = y / norm;
  q[off + 3] = z / norm;
}

/** Advance the buffer one frame under a motion field.
 *
 * Each keypoint's influence field is an anisotropic Gaussian anchored at the
 * keypoint's previous-frame position; Gaussians with any field weight at or
 * above tau_adap move by the raw weighted sum of their controllers' offsets.
 * Uncontrolled rows are untouched. */
export function applyMotion(buf: SceneBuffer, fld: MotionField): void {
  const k = fld.keypoints.length;
  if (k === 0) {
    return;
  }
  const n = buf.n;
  // field precision matrices and anchor positions, from pre-update state
  const prec: number[][] = [];
  const anchors: number[][] = [];
  for (const kp of fld.keypoints) {
    const R = rotmatFromQuat(kp.qAdap, 0);
    // R diag(s^-2) R^T
    const inv = [
      1 / (kp.sAdap[0] * kp.sAdap[0]),
      1 / (kp.sAdap[1] * kp.sAdap[1]),
      1 / (kp.sAdap[2] * kp.sAdap[2]),
    ];
    const P = new Array<number>(9);
    for (let r = 0; r < 3; r++) {
      for (let c = 0; c < 3; c++) {
        P[r * 3 + c] =
          R[r * 3 + 0] * inv[0] * R[c * 3 + 0] +
          R[r * 3 + 1] * inv[1] * R[c * 3 + 1] +
          R[r * 3 + 2] * inv[2] * R[c * 3 + 2];
      }
    }
    prec.push(P);
    const a = kp.index * 3;
    anchors.push([buf.mu[a], buf.mu[a + 1], buf.mu[a + 2]]);
  }

  const muPrev = buf.mu.slice();
  for (let i = 0; i < n; i++) {
    let dmx = 0, dmy = 0, dmz = 0;
    let dqw = 0, dqx = 0, dqy = 0, dqz = 0;
    let controlled = false;
    for (let j = 0; j < k; j++) {
      const P = prec[j];
      const dx = muPrev[i * 3] - anchors[j][0];
      const dy = muPrev[i * 3 + 1] - anchors[j][1];
      const dz = muPrev[i * 3 + 2] - anchors[j][2];
      const m =
        dx * (P[0] * dx + P[1] * dy + P[2] * dz) +
        dy * (P[3] * dx + P[4] * dy + P[5] * dz) +
        dz * (P[6] * dx + P[7] * dy + P[8] * dz);
      const w = Math.exp(-0.5 * m);
      if (w >= fld.tauAdap) {
        controlled = true;
        const kp = fld.keypoints[j];
        dmx += w * kp.deltaMu[0];
        dmy += w * kp.deltaMu[1];
        dmz += w * kp.deltaMu[2];
        dqw += w * kp.deltaQ[0];
        dqx += w * kp.deltaQ[1];
        dqy += w * kp.deltaQ[2];
        dqz += w * kp.deltaQ[3];
      }
    }
    if (!controlled) {
      continue;
    }
    buf.mu[i * 3] = muPrev[i * 3] + dmx;
    buf.mu[i * 3 + 1] = muPrev[i * 3 + 1] + dmy;
    buf.mu[i * 3 + 2] = muPrev[i * 3 + 2] + dmz;
    const norm = Math.hypot(dqw, dqx, dqy, dqz);
    const dq: [number, number, number, number] =
      norm < QUAT_DEGENERATE_NORM
        ? [1, 0, 0, 0]
        : [dqw / norm, dqx / norm, dqy / norm, dqz / norm];
    composeNormalized(dq, buf.q, i * 4);
  }
}

/** Apply a key-frame correction: additive residuals on masked rows only,
 * with the rotation residual composed on the left (no pre-normalization:
 * a near-zero increment is replaced by the identity, anything else is
 * normalized only after composition). */
export function applyResiduals(buf: SceneBuffer, mr: MaskedResiduals): void {
  if (mr.nPoints !== buf.n) {
    throw new Error(`mask covers ${mr.nPoints} Gaussians, scene has ${buf.n}`);
  }
  for (let r = 0; r < mr.indices.length; r++) {
    const i = mr.indices[r];
    buf.mu[i * 3] += mr.dMu[r * 3];
    buf.mu[i * 3 + 1] += mr.dMu[r * 3 + 1];
    buf.mu[i * 3 + 2] += mr.dMu[r * 3 + 2];
    const dqw = mr.dQ[r * 4], dqx = mr.dQ[r * 4 + 1];
    const dqy = mr.dQ[r * 4 + 2], dqz = mr.dQ[r * 4 + 3];
    const norm = Math.hypot(dqw, dqx, dqy, dqz);
    const dq: [number, number, number, number] =
      norm < QUAT_DEGENERATE_NORM ? [1, 0, 0, 0] : [dqw, dqx, dqy, dqz];
    composeNormalized(dq, buf.q, i * 4);
    buf.logS[i * 3] += mr.dLogS[r * 3];
    buf.logS[i * 3 + 1] += mr.dLogS[r * 3 + 1];
    buf.logS[i * 3 + 2] += mr.dLogS[r * 3 + 2];
    buf.logitSigma[i] += mr.dLogitSigma[r];
    for (let c = 0; c < 12; c++) {
      buf.sh[i * 12 + c] += mr.dSh[r * 12 + c];
    }
  }
}
