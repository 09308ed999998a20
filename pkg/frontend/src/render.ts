/** Approximate splat rendering: depth-sorted point sprites with a screen-space
 * Gaussian falloff. Interaction fidelity is the goal here; exact EWA
 * projection belongs to the encoder side. */

import { Mat4, OrbitCamera, multiplyMat4 } from "./camera.js";
import { SceneBuffer } from "./scene.js";

const SH_C0 = 0.28209479177387814;
const SH_C1 = 0.4886025119029199;

const VERT = `#version 300 es
precision highp float;
layout(location = 0) in vec3 a_mu;
layout(location = 1) in float a_scale;
layout(location = 2) in float a_opacity;
layout(location = 3) in vec3 a_color;
uniform mat4 u_viewProj;
uniform vec2 u_viewport;
uniform float u_focal;
out float v_opacity;
out vec3 v_color;
void main() {
  vec4 clip = u_viewProj * vec4(a_mu, 1.0);
  gl_Position = clip;
  float size = u_focal * a_scale / max(clip.w, 1e-6);
  gl_PointSize = clamp(size, 1.0, 256.0);
  v_opacity = a_opacity;
  v_color = a_color;
}`;

const FRAG = `#version 300 es
precision highp float;
in float v_opacity;
in vec3 v_color;
out vec4 frag;
void main() {
  vec2 d = gl_PointCoord * 2.0 - 1.0;
  float r2 = dot(d, d);
  if (r2 > 1.0) discard;
  float alpha = v_opacity * exp(-4.0 * r2);
  frag = vec4(v_color * alpha, alpha);
}`;

/** View-space depth of every point (distance along the forward axis). */
export function computeDepths(mu: Float32Array, view: Mat4, out: Float32Array): void {
  const n = out.length;
  // third row of the view matrix holds -forward
  const zx = view[2], zy = view[6], zz = view[10], zw = view[14];
  for (let i = 0; i < n; i++) {
    out[i] = -(zx * mu[i * 3] + zy * mu[i * 3 + 1] + zz * mu[i * 3 + 2] + zw);
  }
}

/** Index order for back-to-front compositing (largest depth first). */
export function sortByDepthDescending(depths: Float32Array): Uint32Array {
  const order = new Uint32Array(depths.length);
  for (let i = 0; i < order.length; i++) {
    order[i] = i;
  }
  // plain sort is fine at the point counts this viewer targets
  return order.sort((a, b) => depths[b] - depths[a]);
}

/** Degree-1 SH color toward the camera eye, clamped to [0, 1]. */
export function shadeColor(
  sh: Float32Array,
  i: number,
  dir: [number, number, number],
): [number, number, number] {
  const base = i * 12;
  const out: [number, number, number] = [0, 0, 0];
  for (let c = 0; c < 3; c++) {
    let v = 0.5 + SH_C0 * sh[base + c];
    v -= SH_C1 * dir[1] * sh[base + 3 + c];
    v += SH_C1 * dir[2] * sh[base + 6 + c];
    v -= SH_C1 * dir[0] * sh[base + 9 + c];
    out[c] = Math.min(1, Math.max(0, v));
  }
  return out;
}

export class SplatRenderer {
  private gl: WebGL2RenderingContext;
  private program: WebGLProgram;
  private vao: WebGLVertexArrayObject;
  private buffers: { mu: WebGLBuffer; scale: WebGLBuffer; opacity: WebGLBuffer; color: WebGLBuffer };
  private capacity = 0;
  private depths = new Float32Array(0);
  private scratch = {
    mu: new Float32Array(0),
    scale: new Float32Array(0),
    opacity: new Float32Array(0),
    color: new Float32Array(0),
  };

  constructor(private canvas: HTMLCanvasElement) {
    const gl = canvas.getContext("webgl2", { antialias: false, alpha: false });
    if (!gl) {
      throw new Error("WebGL2 unavailable");
    }
    this.gl = gl;
    this.program = this.link(VERT, FRAG);
    this.vao = gl.createVertexArray()!;
    this.buffers = {
      mu: gl.createBuffer()!,
      scale: gl.createBuffer()!,
      opacity: gl.createBuffer()!,
      color: gl.createBuffer()!,
    };
    gl.disable(gl.DEPTH_TEST);
    gl.enable(gl.BLEND);
    // premultiplied back-to-front "over"
    gl.blendFunc(gl.ONE, gl.ONE_MINUS_SRC_ALPHA);
    gl.clearColor(0, 0, 0, 1);
  }

  /** Upload the buffer re-sorted for the camera and draw one frame. */
  draw(scene: SceneBuffer, camera: OrbitCamera): void {
    const gl = this.gl;
    const n = scene.n;
    this.ensureCapacity(n);

    const view = camera.viewMatrix();
    computeDepths(scene.mu, view, this.depths.subarray(0, n) as Float32Array);
    const order = sortByDepthDescending(this.depths.subarray(0, n) as Float32Array);

    const eye = camera.eye();
    const { mu, scale, opacity, color } = this.scratch;
    for (let slot = 0; slot < n; slot++) {
      const i = order[slot];
      mu[slot * 3] = scene.mu[i * 3];
      mu[slot * 3 + 1] = scene.mu[i * 3 + 1];
      mu[slot * 3 + 2] = scene.mu[i * 3 + 2];
      const s = Math.exp(
        (scene.logS[i * 3] + scene.logS[i * 3 + 1] + scene.logS[i * 3 + 2]) / 3,
      );
      scale[slot] = 3 * s;
      opacity[slot] = 1 / (1 + Math.exp(-scene.logitSigma[i]));
      const dx = scene.mu[i * 3] - eye[0];
      const dy = scene.mu[i * 3 + 1] - eye[1];
      const dz = scene.mu[i * 3 + 2] - eye[2];
      const norm = Math.hypot(dx, dy, dz) || 1;
      const rgb = shadeColor(scene.sh, i, [dx / norm, dy / norm, dz / norm]);
      color[slot * 3] = rgb[0];
      color[slot * 3 + 1] = rgb[1];
      color[slot * 3 + 2] = rgb[2];
    }

    const dpr = Math.min(window.devicePixelRatio || 1, 2);
    const w = Math.max(1, Math.floor(this.canvas.clientWidth * dpr));
    const h = Math.max(1, Math.floor(this.canvas.clientHeight * dpr));
    if (this.canvas.width !== w || this.canvas.height !== h) {
      this.canvas.width = w;
      this.canvas.height = h;
    }
    gl.viewport(0, 0, w, h);
    gl.clear(gl.COLOR_BUFFER_BIT);

    gl.useProgram(this.program);
    gl.bindVertexArray(this.vao);
    this.attrib(this.buffers.mu, 0, 3, mu.subarray(0, n * 3));
    this.attrib(this.buffers.scale, 1, 1, scale.subarray(0, n));
    this.attrib(this.buffers.opacity, 2, 1, opacity.subarray(0, n));
    this.attrib(this.buffers.color, 3, 3, color.subarray(0, n * 3));

    const viewProj = multiplyMat4(camera.projectionMatrix(w / h), view);
    gl.uniformMatrix4fv(gl.getUniformLocation(this.program, "u_viewProj"), false, viewProj);
    gl.uniform2f(gl.getUniformLocation(this.program, "u_viewport"), w, h);
    const focal = h / (2 * Math.tan(camera.fovY / 2));
    gl.uniform1f(gl.getUniformLocation(this.program, "u_focal"), focal);

    gl.drawArrays(gl.POINTS, 0, n);
    gl.bindVertexArray(null);
  }

  private ensureCapacity(n: number): void {
    if (n <= this.capacity) {
      return;
    }
    this.capacity = n;
    this.depths = new Float32Array(n);
    this.scratch = {
      mu: new Float32Array(n * 3),
      scale: new Float32Array(n),
      opacity: new Float32Array(n),
      color: new Float32Array(n * 3),
    };
  }

  private attrib(buffer: WebGLBuffer, loc: number, size: number, data: Float32Array): void {
    const gl = this.gl;
    gl.bindBuffer(gl.ARRAY_BUFFER, buffer);
    gl.bufferData(gl.ARRAY_BUFFER, data, gl.DYNAMIC_DRAW);
    gl.enableVertexAttribArray(loc);
    gl.vertexAttribPointer(loc, size, gl.FLOAT, false, 0, 0);
  }

  private link(vertSrc: string, fragSrc: string): WebGLProgram {
    const gl = this.gl;
    const compile = (type: number, src: string) => {
      const sh = gl.createShader(type)!;
      gl.shaderSource(sh, src);
      gl.compileShader(sh);
      if (!gl.getShaderParameter(sh, gl.COMPILE_STATUS)) {
        throw new Error(`shader: ${gl.getShaderInfoLog(sh)}`);
      }
      return sh;
    };
    const prog = gl.createProgram()!;
    gl.attachShader(prog, compile(gl.VERTEX_SHADER, vertSrc));
    gl.attachShader(prog, compile(gl.FRAGMENT_SHADER, fragSrc));
    gl.linkProgram(prog);
    if (!gl.getProgramParameter(prog, gl.LINK_STATUS)) {
      throw new Error(`link: ${gl.getProgramInfoLog(prog)}`);
    }
    return prog;
  }
}
