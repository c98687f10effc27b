export {
  DTYPE_F32,
  FORMAT_VERSION,
  HEADER_BYTES,
  MAGIC,
  decodeFeatureGrid,
  encodeFeatureGrid,
  featureFileBytes,
  fileSha256,
  makeFeatureGrid,
  readFeatureGridFile,
  sha256Hex,
  writeFeatureGridFile,
  type FeatureGrid,
} from "./cmft.js";
export {
  avgPool2,
  farthestPointSample,
  idwInterpolate,
  knnGroups,
  repeatUpsample,
  scaleGridPositions,
} from "./geometry.js";
export {
  foregroundPoints,
  readRgbPng,
  readXyzTiff,
  resizeBilinear,
  writeXyzTiff,
  type ForegroundPoints,
  type RgbImage,
  type XyzGrid,
} from "./images.js";
export { Pcg64, seededStartIndex } from "./nprandom.js";
export {
  createPcBackbone,
  createRgbBackbone,
  registerPcBackbone,
  registerRgbBackbone,
  type PcBackbone,
  type PcBackboneOptions,
  type RgbBackbone,
  type RgbBackboneOptions,
} from "./backbones.js";
export {
  ExportDataError,
  runExport,
  type ExportFailure,
  type ExportOptions,
  type ExportSummary,
} from "./export.js";
