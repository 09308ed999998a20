/** User-steered orbit camera. Azimuth/elevation/distance around a target,
 * elevation clamped away from the poles so the up vector never flips. */

export type Mat4 = Float32Array; // column-major, WebGL convention

const MIN_DISTANCE = 0.05;
const MAX_ELEVATION = Math.PI / 2 - 0.05;

export class OrbitCamera {
  target: [number, number, number] = [0, 0, 0];
  azimuth = 0.6;
  elevation = 0.35;
  distance = 3.0;
  fovY = (50 * Math.PI) / 180;
  near = 0.01;
  far = 100.0;

  orbit(dAzimuth: number, dElevation: number): void {
    this.azimuth = (this.azimuth + dAzimuth) % (2 * Math.PI);
    this.elevation = clamp(this.elevation + dElevation, -MAX_ELEVATION, MAX_ELEVATION);
  }

  zoom(factor: number): void {
    this.distance = Math.max(MIN_DISTANCE, this.distance * factor);
  }

  pan(dx: number, dy: number): void {
    // move the target in the camera's screen plane
    const [right, up] = this.axes();
    const scale = this.distance;
    for (let i = 0; i < 3; i++) {
      this.target[i] += (-dx * right[i] + dy * up[i]) * scale;
    }
  }

  /** Camera origin in world coordinates. */
  eye(): [number, number, number] {
    const ce = Math.cos(this.elevation);
    return [
      this.target[0] + this.distance * ce * Math.cos(this.azimuth),
      this.target[1] + this.distance * ce * Math.sin(this.azimuth),
      this.target[2] + this.distance * Math.sin(this.elevation),
    ];
  }

  private axes(): [number[], number[]] {
    const eye = this.eye();
    const fwd = normalize([
      this.target[0] - eye[0],
      this.target[1] - eye[1],
      this.target[2] - eye[2],
    ]);
    const right = normalize(cross(fwd, [0, 0, 1]));
    const up = cross(right, fwd);
    return [right, up];
  }

  viewMatrix(): Mat4 {
    const eye = this.eye();
    const fwd = normalize([
      this.target[0] - eye[0],
      this.target[1] - eye[1],
      this.target[2] - eye[2],
    ]);
    const right = normalize(cross(fwd, [0, 0, 1]));
    const up = cross(right, fwd);
    // rows: right, up, -forward; translation brings eye to origin
    const m = new Float32Array(16);
    m[0] = right[0]; m[4] = right[1]; m[8] = right[2];
    m[1] = up[0]; m[5] = up[1]; m[9] = up[2];
    m[2] = -fwd[0]; m[6] = -fwd[1]; m[10] = -fwd[2];
    m[12] = -(right[0] * eye[0] + right[1] * eye[1] + right[2] * eye[2]);
    m[13] = -(up[0] * eye[0] + up[1] * eye[1] + up[2] * eye[2]);
    m[14] = fwd[0] * eye[0] + fwd[1] * eye[1] + fwd[2] * eye[2];
    m[15] = 1;
    return m;
  }

  projectionMatrix(aspect: number): Mat4 {
    const f = 1 / Math.tan(this.fovY / 2);
    const m = new Float32Array(16);
    m[0] = f / aspect;
    m[5] = f;
    m[10] = (this.far + this.near) / (this.near - this.far);
    m[11] = -1;
    m[14] = (2 * this.far * this.near) / (this.near - this.far);
    return m;
  }
}

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, v));
}

function cross(a: ArrayLike<number>, b: ArrayLike<number>): number[] {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function normalize(v: number[]): number[] {
  const n = Math.hypot(v[0], v[1], v[2]);
  if (n < 1e-12) {
    return [1, 0, 0];
  }
  return [v[0] / n, v[1] / n, v[2] / n];
}

export function multiplyMat4(a: Mat4, b: Mat4): Mat4 {
  const out = new Float32Array(16);
  for (let c = 0; c < 4; c++) {
    for (let r = 0; r < 4; r++) {
      let acc = 0;
      for (let i = 0; i < 4; i++) {
        acc += a[i * 4 + r] * b[c * 4 + i];
      }
      out[c * 4 + r] = acc;
    }
  }
  return out;
}
