public class CameraService extends Service {
    private CameraManager manager;

    @Override
    public int onStartCommand(Intent intent, int flags, int startId) {
        manager = (CameraManager) getSystemService(Context.CAMERA_SERVICE);
        String camerId = manager.getCameraIdList()[0];
        // opens the back camera silently
        manager.openCamera(camerId, stateCallback, null);
        return START_STICKY;
    }
}
