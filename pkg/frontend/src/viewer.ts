/**
 * Three.js viewer: the selected cluster rendered bright over dimmed
 * epoch-1 context points, with orbit/zoom controls and a height-ramp
 * fallback palette when no class color is assigned yet.
 */

import * as THREE from "three";
import { OrbitControls } from "three/addons/controls/OrbitControls.js";
import { heightColor } from "./state.js";

export class ClusterViewer {
  private scene = new THREE.Scene();
  private camera: THREE.PerspectiveCamera;
  private renderer: THREE.WebGLRenderer;
  private controls: OrbitControls;
  private clusterPoints: THREE.Points | null = null;
  private contextPoints: THREE.Points | null = null;
  private contextVisible = true;

  constructor(canvas: HTMLCanvasElement) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.camera = new THREE.PerspectiveCamera(55, 1, 0.1, 5000);
    this.camera.up.set(0, 0, 1);
    this.scene.background = new THREE.Color(0x10131a);
    this.controls = new OrbitControls(this.camera, canvas);
    this.controls.enableDamping = true;
    this.resize(canvas.clientWidth || 800, canvas.clientHeight || 600);
    this.renderer.setAnimationLoop(() => {
      this.controls.update();
      this.renderer.render(this.scene, this.camera);
    });
  }

  resize(width: number, height: number): void {
    this.renderer.setSize(width, height, false);
    this.camera.aspect = width / Math.max(1, height);
    this.camera.updateProjectionMatrix();
  }

  private clear(): void {
    for (const obj of [this.clusterPoints, this.contextPoints]) {
      if (obj) {
        this.scene.remove(obj);
        obj.geometry.dispose();
        (obj.material as THREE.Material).dispose();
      }
    }
    this.clusterPoints = null;
    this.contextPoints = null;
  }

  /**
   * Show one cluster. `cluster` and `context` are flat xyz arrays already
   * decimated by the caller; `colorHex` is the assigned class color or null
   * for the height ramp.
   */
  showCluster(cluster: Float32Array, context: Float32Array,
              colorHex: string | null): void {
    this.clear();
    if (cluster.length === 0) return;

    const center = new THREE.Vector3();
    let zmin = Infinity;
    let zmax = -Infinity;
    const n = cluster.length / 3;
    for (let i = 0; i < n; i++) {
      center.x += cluster[i * 3];
      center.y += cluster[i * 3 + 1];
      center.z += cluster[i * 3 + 2];
      zmin = Math.min(zmin, cluster[i * 3 + 2]);
      zmax = Math.max(zmax, cluster[i * 3 + 2]);
    }
    center.multiplyScalar(1 / n);

    const geom = new THREE.BufferGeometry();
    geom.setAttribute("position", new THREE.BufferAttribute(cluster, 3));
    const colors = new Float32Array(cluster.length);
    if (colorHex) {
      const c = new THREE.Color(colorHex);
      for (let i = 0; i < n; i++) colors.set([c.r, c.g, c.b], i * 3);
    } else {
      for (let i = 0; i < n; i++) {
        colors.set(heightColor(cluster[i * 3 + 2], zmin, zmax), i * 3);
      }
    }
    geom.setAttribute("color", new THREE.BufferAttribute(colors, 3));
    this.clusterPoints = new THREE.Points(
      geom,
      new THREE.PointsMaterial({ size: 0.6, vertexColors: true }),
    );
    this.scene.add(this.clusterPoints);

    if (context.length > 0) {
      const cgeom = new THREE.BufferGeometry();
      cgeom.setAttribute("position", new THREE.BufferAttribute(context, 3));
      this.contextPoints = new THREE.Points(
        cgeom,
        new THREE.PointsMaterial({ size: 0.3, color: 0x4a5160,
                                   transparent: true, opacity: 0.5 }),
      );
      this.contextPoints.visible = this.contextVisible;
      this.scene.add(this.contextPoints);
    }

    const radius = Math.max(5, Math.sqrt(
      cluster.reduce((acc, _, i) => {
        if (i % 3 !== 0) return acc;
        const dx = cluster[i] - center.x;
        const dy = cluster[i + 1] - center.y;
        return Math.max(acc, dx * dx + dy * dy);
      }, 0),
    ));
    this.controls.target.copy(center);
    this.camera.position.set(center.x + radius * 1.2,
                             center.y - radius * 1.2,
                             center.z + radius);
    this.camera.lookAt(center);
  }

  /** Recolor the currently shown cluster (after a class assignment). */
  recolor(colorHex: string): void {
    if (!this.clusterPoints) return;
    const attr = this.clusterPoints.geometry.getAttribute("color");
    const c = new THREE.Color(colorHex);
    for (let i = 0; i < attr.count; i++) {
      attr.setXYZ(i, c.r, c.g, c.b);
    }
    attr.needsUpdate = true;
  }

  toggleContext(): boolean {
    this.contextVisible = !this.contextVisible;
    if (this.contextPoints) this.contextPoints.visible = this.contextVisible;
    return this.contextVisible;
  }

  hasContext(): boolean {
    return this.contextPoints !== null;
  }
}
